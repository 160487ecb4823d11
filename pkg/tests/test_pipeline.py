import json
import os
import subprocess
import sys

import pytest
import torch

from stepstone import pipeline
from stepstone.cli import main as cli_main
from stepstone.config import PipelineConfig, load_config, micro_config
from stepstone.errors import ConfigError, DependencyError, StalenessError


def test_config_hash_stable_and_sensitive():
    a = PipelineConfig()
    b = PipelineConfig()
    assert a.config_hash == b.config_hash
    c = a.replace_section("dataset", n_scenes=7)
    assert c.config_hash != a.config_hash


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[dataset]\nn_scenes = 5\nwhatever = 3\n")
    with pytest.raises(ConfigError):
        load_config(str(path))
    path2 = tmp_path / "bad2.ini"
    path2.write_text("[nosuchsection]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(str(path2))


def test_load_config_applies_values(tmp_path):
    path = tmp_path / "ok.ini"
    path.write_text(
        "[dataset]\nn_scenes = 12\n[alignment]\nlambda_bg = 3.5\n"
        "[svr]\nmin_val_miou = none\n"
    )
    cfg = load_config(str(path), {"run.seed": "9"})
    assert cfg.dataset.n_scenes == 12
    assert cfg.alignment.lambda_bg == 3.5
    assert cfg.svr.min_val_miou is None
    assert cfg.seed == 9


def test_dependency_error_when_prerequisite_missing(tmp_path):
    cfg = micro_config()
    with pytest.raises(DependencyError) as exc:
        pipeline.run_stage("embedder", cfg, str(tmp_path / "root"))
    assert "dataset" in str(exc.value)


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run_stage("nonsense", micro_config(), str(tmp_path))


def test_up_to_date_and_staleness(tmp_path):
    cfg = micro_config().replace_section("dataset", n_scenes=3, n_views=2,
                                         resolution=32, samples_per_ray=24)
    root = str(tmp_path / "root")
    first = pipeline.run_stage("dataset", cfg, root)
    assert first["status"] == "built"
    second = pipeline.run_stage("dataset", cfg, root)
    assert second["status"] == "up-to-date"

    changed = cfg.replace_section("dataset", n_scenes=4)
    with pytest.raises(StalenessError):
        pipeline.run_stage("dataset", changed, root)
    forced = pipeline.run_stage("dataset", changed, root, force=True)
    assert forced["status"] == "built"


def test_run_manifest_appends_and_verifies(tmp_path):
    cfg = micro_config().replace_section("dataset", n_scenes=3, n_views=2,
                                         resolution=32, samples_per_ray=24)
    root = str(tmp_path / "root")
    pipeline.run_stage("dataset", cfg, root)
    entries = pipeline.load_run_manifest(root)
    assert len(entries) == 1
    assert entries[0]["stage"] == "dataset"
    assert entries[0]["config_hash"] == cfg.config_hash
    assert "code_digest" in entries[0]


def test_lock_prevents_concurrent_stage(tmp_path):
    cfg = micro_config().replace_section("dataset", n_scenes=3, n_views=2,
                                         resolution=32, samples_per_ray=24)
    root = str(tmp_path / "root")
    os.makedirs(root, exist_ok=True)
    lock = os.path.join(root, ".lock")
    with open(lock, "w") as f:
        f.write("held")
    with pytest.raises(DependencyError):
        pipeline.run_stage("dataset", cfg, root)
    os.unlink(lock)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path):
    root = str(tmp_path / "root")
    # dependency error -> 3
    rc = cli_main(["train-embedder", "--out-dir", root])
    assert rc == 3
    # config error -> 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[dataset]\nbogus = 1\n")
    rc = cli_main(["dataset", "--config", str(bad), "--out-dir", root])
    assert rc == 2


def test_cli_dataset_and_info_roundtrip(tmp_path, capsys):
    root = str(tmp_path / "root")
    rc = cli_main([
        "dataset", "--out-dir", root,
        "--set", "dataset.n_scenes=3", "--set", "dataset.n_views=2",
        "--set", "dataset.resolution=32", "--set", "dataset.samples_per_ray=24",
    ])
    assert rc == 0
    assert os.path.exists(os.path.join(root, "dataset", "manifest.json"))
    out = capsys.readouterr().out
    assert "built" in out


def test_cli_checkpoint_verify(tmp_path, capsys):
    from stepstone.checkpoint import save

    path = str(tmp_path / "x.ckpt")
    save(path, {"w": torch.randn(3)}, {"kind": "test"})
    rc = cli_main(["checkpoint-verify", path])
    assert rc == 0
    # corrupt it
    raw = bytearray(open(path, "rb").read())
    raw[-2] ^= 0x01
    with open(path, "wb") as f:
        f.write(bytes(raw))
    rc = cli_main(["checkpoint-verify", path])
    assert rc == 4


def test_cli_align_on_micro_artifacts(micro_root, micro_manifest, capsys):
    caption = micro_manifest.by_split("test")[0].caption.text
    rc = cli_main([
        "align", "--out-dir", micro_root, "--text", caption, "--seed", "3",
        "--set", "alignment.stage2_iters=2", "--set", "alignment.m_views=2",
        "--set", "alignment.mapper_hidden=64",
        "--set", "field.width=32", "--set", "field.hidden_layers=2",
        "--set", "field.latent_dim=32", "--set", "field.posenc_bands=4",
    ])
    assert rc == 0
    out_dir = os.path.join(micro_root, "generations", caption.replace(" ", "_"))
    assert os.path.exists(os.path.join(out_dir, "mapper_prime.ckpt"))
    assert os.path.exists(os.path.join(out_dir, "loss.csv"))
    assert os.path.exists(os.path.join(out_dir, "turntable.png"))
    assert os.path.exists(os.path.join(out_dir, "occupancy.npz"))


def test_cli_embedder_info(micro_root, capsys):
    rc = cli_main(["embedder-info", "--out-dir", micro_root])
    assert rc == 0
    out = capsys.readouterr().out
    meta = json.loads(out)
    assert meta["kind"] == "embedder"
    assert "vocab" in meta
