import json
import os

import pytest
import torch

from stepstone import pipeline
from stepstone.config import micro_config


def cache_root(tmp_path_factory, name: str) -> str:
    """Artifact cache shared across test runs when STEPSTONE_TEST_CACHE is
    set (the pipeline's config-hash markers keep reuse safe)."""
    base = os.environ.get("STEPSTONE_TEST_CACHE")
    if base:
        path = os.path.join(base, name)
        os.makedirs(path, exist_ok=True)
        return path
    return str(tmp_path_factory.mktemp(name))


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config()


@pytest.fixture(scope="session")
def micro_root(tmp_path_factory, micro_cfg):
    """Micro pipeline artifacts: dataset, embedder, svr, stage1, prior,
    image model. Tiny sizes, quality gates off."""
    root = cache_root(tmp_path_factory, "micro")
    for stage in ("dataset", "embedder", "svr", "stage1", "prior", "image"):
        pipeline.run_stage(stage, micro_cfg, root)
    return root


@pytest.fixture(scope="session")
def micro_artifacts(micro_root):
    from stepstone.pipeline import load_alignment_inputs

    embedder, svr_encoder, mapper, decoder = load_alignment_inputs(micro_root)
    return {
        "root": micro_root,
        "embedder": embedder,
        "svr_encoder": svr_encoder,
        "mapper": mapper,
        "decoder": decoder,
    }


@pytest.fixture(scope="session")
def micro_manifest(micro_root):
    from stepstone.scenes import load_manifest

    return load_manifest(os.path.join(micro_root, "dataset"))


def cached_json(root: str, name: str, key: str, builder):
    """Compute-once JSON cache keyed by a config hash; used by the
    acceptance suite so reruns against unchanged artifacts are cheap."""
    path = os.path.join(root, "acceptance", f"{name}.json")
    if os.path.exists(path):
        with open(path) as f:
            doc = json.load(f)
        if doc.get("key") == key:
            return doc["value"]
    value = builder()
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump({"key": key, "value": value}, f, sort_keys=True)
    os.replace(tmp, path)
    return value
