"""Stage orchestration: dependency-checked, atomic, reproducible.

Each stage writes its outputs through atomic file replaces, then drops a
completion marker recording the config hash; reruns with the same hash
short-circuit, hash mismatches are staleness errors unless forced. Every
execution appends to an append-only run manifest with input/output digests.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import alignment as align_mod
from . import diffusion as diff_mod
from . import embedder as emb_mod
from . import evaluate as eval_mod
from . import field as field_mod
from . import scenes as scenes_mod
from . import svr as svr_mod
from .checkpoint import file_digest, load, params_digest, save
from .config import PipelineConfig
from .errors import DependencyError, StalenessError
from .seeding import derive_seed

STAGE_DEPS = {
    "dataset": [],
    "embedder": ["dataset"],
    "svr": ["dataset"],
    "baseline": ["dataset", "embedder"],
    "stage1": ["dataset", "embedder", "svr"],
    "prior": ["dataset", "embedder"],
    "image": ["dataset", "embedder"],
    "eval": ["dataset", "embedder", "svr", "stage1"],
}

CHECKPOINTS = {
    "embedder": ["checkpoints/embedder.ckpt"],
    "svr": ["checkpoints/svr_encoder.ckpt", "checkpoints/svr_decoder.ckpt"],
    "baseline": ["checkpoints/baseline_decoder.ckpt"],
    "stage1": ["checkpoints/mapper.ckpt", "checkpoints/decoder_stage1.ckpt"],
    "prior": ["checkpoints/prior.ckpt"],
    "image": ["checkpoints/image_diffusion.ckpt"],
    "eval": ["metrics/metrics.json"],
}


def _marker_path(root: str, stage: str) -> str:
    return os.path.join(root, "status", f"{stage}.done.json")


def _code_digest() -> str:
    import stepstone

    pkg_dir = os.path.dirname(os.path.abspath(stepstone.__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            h.update(name.encode())
            with open(os.path.join(pkg_dir, name), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


@contextlib.contextmanager
def _stage_lock(root: str):
    os.makedirs(root, exist_ok=True)
    lock = os.path.join(root, ".lock")
    fd = None
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        yield
    except FileExistsError:
        raise DependencyError(
            f"another stage is running in {root} (lock file {lock} exists)"
        )
    finally:
        if fd is not None:
            os.close(fd)
            os.unlink(lock)


def _append_manifest(root: str, entry: dict) -> None:
    path = os.path.join(root, "run_manifest.jsonl")
    with open(path, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def load_run_manifest(root: str, verify: bool = True) -> list:
    path = os.path.join(root, "run_manifest.jsonl")
    if not os.path.exists(path):
        return []
    entries = []
    with open(path) as f:
        for line in f:
            entries.append(json.loads(line))
    if verify:
        from .errors import IntegrityError

        for e in entries:
            for rel, digest in e.get("outputs", {}).items():
                full = os.path.join(root, rel)
                if os.path.exists(full) and file_digest(full) != digest:
                    latest = max(
                        (x for x in entries if rel in x.get("outputs", {})),
                        key=lambda x: x["wall_end"],
                    )
                    if latest is e:
                        raise IntegrityError(
                            f"{rel} does not match its recorded digest"
                        )
    return entries


def run_stage(stage: str, cfg: PipelineConfig, root: str, force: bool = False) -> dict:
    """Execute one pipeline stage; returns {"status", "outputs", "metrics"}."""
    if stage not in STAGE_DEPS:
        from .errors import ConfigError

        raise ConfigError(f"unknown stage {stage!r}")
    os.makedirs(root, exist_ok=True)
    marker = _marker_path(root, stage)
    if os.path.exists(marker):
        with open(marker) as f:
            prior = json.load(f)
        if prior["config_hash"] == cfg.config_hash and not force:
            return {"status": "up-to-date", "outputs": prior["outputs"],
                    "metrics": prior.get("metrics", {})}
        if prior["config_hash"] != cfg.config_hash and not force:
            raise StalenessError(
                f"stage {stage} was built under config {prior['config_hash'][:12]}, "
                f"current is {cfg.config_hash[:12]} (use --force to rebuild)"
            )
    for dep in STAGE_DEPS[stage]:
        dep_marker = _marker_path(root, dep)
        if not os.path.exists(dep_marker):
            raise DependencyError(
                f"stage {stage!r} requires stage {dep!r}; run {dep!r} first"
            )
        with open(dep_marker) as f:
            dep_info = json.load(f)
        if dep_info["config_hash"] != cfg.config_hash and not force:
            raise StalenessError(
                f"dependency {dep!r} was built under a different config; "
                f"rerun it (or pass --force)"
            )

    if cfg.run.threads > 0:
        torch.set_num_threads(cfg.run.threads)

    with _stage_lock(root):
        t0 = time.time()
        metrics = _STAGE_FNS[stage](cfg, root)
        t1 = time.time()
        outputs = {}
        for rel in _stage_outputs(stage):
            full = os.path.join(root, rel)
            if os.path.isdir(full):
                outputs[rel] = "dir"
            else:
                outputs[rel] = file_digest(full)
        entry = {
            "stage": stage,
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "inputs": {
                dep: json.load(open(_marker_path(root, dep)))["config_hash"]
                for dep in STAGE_DEPS[stage]
            },
            "outputs": {k: v for k, v in outputs.items() if v != "dir"},
            "wall_time_s": round(t1 - t0, 3),
            "wall_end": t1,
            "code_digest": _code_digest(),
        }
        _append_manifest(root, entry)
        os.makedirs(os.path.dirname(marker), exist_ok=True)
        tmp = marker + ".tmp"
        with open(tmp, "w") as f:
            json.dump(
                {"config_hash": cfg.config_hash, "outputs": outputs,
                 "metrics": metrics},
                f, sort_keys=True,
            )
        os.replace(tmp, marker)
    return {"status": "built", "outputs": outputs, "metrics": metrics}


def _stage_outputs(stage: str) -> list:
    if stage == "dataset":
        return ["dataset"]
    return CHECKPOINTS[stage]


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _dataset_stage(cfg: PipelineConfig, root: str) -> dict:
    final = os.path.join(root, "dataset")
    tmp = os.path.join(root, "tmp-dataset")
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    manifest = scenes_mod.build_dataset(
        n_scenes=cfg.dataset.n_scenes,
        n_views=cfg.dataset.n_views,
        resolution=cfg.dataset.resolution,
        seed=derive_seed(cfg.seed, "dataset"),
        root=tmp,
        samples_per_ray=cfg.dataset.samples_per_ray,
        camera_radius=cfg.dataset.camera_radius,
        elevation_range_deg=cfg.dataset.elevation_deg,
    )
    if os.path.exists(final):
        shutil.rmtree(final)
    os.replace(tmp, final)
    return {"n_scenes": len(manifest.entries)}


def _load_dataset(root: str):
    return scenes_mod.load_manifest(os.path.join(root, "dataset"))


def _embedder_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    params = emb_mod.train_contrastive(
        manifest, cfg.embedder, derive_seed(cfg.seed, "embedder")
    )
    emb_mod.save_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt"), params,
        {"config_hash": cfg.config_hash},
    )
    return {"val_retrieval_top1": params._val_retrieval_top1}


def _svr_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    encoder, decoder, metrics = svr_mod.train_svr(
        manifest, cfg.field_cfg, cfg.svr, derive_seed(cfg.seed, "svr")
    )
    svr_mod.save_encoder(
        os.path.join(root, "checkpoints", "svr_encoder.ckpt"), encoder,
        {"config_hash": cfg.config_hash},
    )
    field_mod.save_decoder(
        os.path.join(root, "checkpoints", "svr_decoder.ckpt"), decoder,
        {"config_hash": cfg.config_hash, "val_miou": metrics["val_miou"]},
    )
    return {"val_miou": metrics["val_miou"]}


def _baseline_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    decoder, metrics = svr_mod.train_clip_baseline(
        manifest, embedder, cfg.field_cfg, cfg.svr,
        derive_seed(cfg.seed, "baseline"),
    )
    field_mod.save_decoder(
        os.path.join(root, "checkpoints", "baseline_decoder.ckpt"), decoder,
        {"config_hash": cfg.config_hash, "val_miou": metrics["val_miou"],
         "baseline": "image-embedder-frozen"},
    )
    return {"val_miou": metrics["val_miou"]}


def _stage1_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    svr_encoder, _ = svr_mod.load_encoder(
        os.path.join(root, "checkpoints", "svr_encoder.ckpt")
    )
    decoder, _ = field_mod.load_decoder(
        os.path.join(root, "checkpoints", "svr_decoder.ckpt")
    )
    mapper, decoder_ft, metrics = align_mod.stage1_train(
        manifest, embedder, svr_encoder, decoder, cfg.alignment,
        derive_seed(cfg.seed, "stage1"),
    )
    align_mod.save_mapper(
        os.path.join(root, "checkpoints", "mapper.ckpt"), mapper,
        {"config_hash": cfg.config_hash},
    )
    field_mod.save_decoder(
        os.path.join(root, "checkpoints", "decoder_stage1.ckpt"), decoder_ft,
        {"config_hash": cfg.config_hash},
    )
    return {
        "final_mapper_loss": metrics["mapper_loss_history"][-1]
        if metrics["mapper_loss_history"] else None,
    }


def _pairs_for_diffusion(manifest, embedder, kind):
    f_i, f_t, images = [], [], []
    for e in manifest.by_split("train"):
        with torch.no_grad():
            ft = emb_mod.embed_text(embedder, e.caption)
        for k in range(len(e.view_paths)):
            img = scenes_mod.load_view(manifest, e, k)
            with torch.no_grad():
                fi = emb_mod.embed_image(embedder, img)
            f_i.append(fi)
            f_t.append(ft)
            images.append(img)
    if kind == "embedding_prior":
        return torch.stack(f_i), torch.stack(f_t)
    return torch.stack(images), torch.stack(f_t)


def _prior_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    pairs = _pairs_for_diffusion(manifest, embedder, "embedding_prior")
    model, metrics = diff_mod.train_diffusion(
        "embedding_prior", pairs, cfg.prior, derive_seed(cfg.seed, "prior")
    )
    diff_mod.save_diffusion(
        os.path.join(root, "checkpoints", "prior.ckpt"), model,
        {"config_hash": cfg.config_hash},
    )
    return metrics


def _image_stage(cfg: PipelineConfig, root: str) -> dict:
    manifest = _load_dataset(root)
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    pairs = _pairs_for_diffusion(manifest, embedder, "image_model")
    model, metrics = diff_mod.train_diffusion(
        "image_model", pairs, cfg.image_diffusion,
        derive_seed(cfg.seed, "image-model"),
    )
    diff_mod.save_diffusion(
        os.path.join(root, "checkpoints", "image_diffusion.ckpt"), model,
        {"config_hash": cfg.config_hash},
    )
    return metrics


# ---------------------------------------------------------------------------
# Stage-2 sweeps and the metric bundle
# ---------------------------------------------------------------------------

def load_alignment_inputs(root: str):
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    svr_encoder, _ = svr_mod.load_encoder(
        os.path.join(root, "checkpoints", "svr_encoder.ckpt")
    )
    mapper, _ = align_mod.load_mapper(os.path.join(root, "checkpoints", "mapper.ckpt"))
    decoder, _ = field_mod.load_decoder(
        os.path.join(root, "checkpoints", "decoder_stage1.ckpt")
    )
    return embedder, svr_encoder, mapper, decoder


def sweep_captions(manifest, split: str, n: int, seed: int) -> list:
    """Deterministic choice of n caption entries from a split."""
    entries = manifest.by_split(split)
    rng = np.random.default_rng(derive_seed(seed, "caption-choice", split))
    idx = rng.permutation(len(entries))[: min(n, len(entries))]
    return [entries[i] for i in sorted(idx)]


def _sweep_worker(payload):
    (root, align_cfg, text, run_seed, use_prior, tau) = payload
    torch.set_num_threads(1)
    embedder, _, mapper, decoder = load_alignment_inputs(root)
    prior = None
    if use_prior:
        prior, _ = diff_mod.load_diffusion(
            os.path.join(root, "checkpoints", "prior.ckpt")
        )
    m_prime, target, rows = align_mod.stage2_align(
        text, mapper, decoder, embedder, align_cfg, run_seed,
        use_prior=use_prior, prior=prior, tau=tau,
    )
    with torch.no_grad():
        latent = align_mod.map_embedding(m_prime, target)
    return text, run_seed, {k: v.numpy() for k, v in m_prime.state_dict().items()}, \
        latent.numpy(), rows


def run_stage2_sweep(
    root: str, cfg: PipelineConfig, jobs: list, workers: int = 1
) -> list:
    """Run stage-2 alignment for jobs of (text, seed, use_prior, tau).

    Returns [(text, seed, mapper_prime, latent, rows)] in job order.
    """
    payloads = [
        (root, cfg.alignment, text, seed, use_prior, tau)
        for (text, seed, use_prior, tau) in jobs
    ]
    raw = []
    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ctx.Pool(workers) as pool:
            raw = pool.map(_sweep_worker, payloads)
    else:
        # the worker pins itself to one thread for cross-mode determinism;
        # restore the caller's thread count afterwards
        n_threads = torch.get_num_threads()
        try:
            raw = [_sweep_worker(p) for p in payloads]
        finally:
            torch.set_num_threads(n_threads)
    out = []
    for text, seed, state_np, latent_np, rows in raw:
        emb_dim = state_np["layers.0.weight"].shape[1]
        lat_dim = state_np[f"layers.{align_mod.MAPPER_LAYERS - 1}.weight"].shape[0]
        hidden = state_np["layers.0.weight"].shape[0]
        m_prime = align_mod.Mapper(emb_dim, lat_dim, hidden)
        m_prime.load_state_dict({k: torch.from_numpy(v) for k, v in state_np.items()})
        out.append((text, seed, m_prime, torch.from_numpy(latent_np), rows))
    return out


def _eval_stage(cfg: PipelineConfig, root: str) -> dict:
    """Deterministic metric bundle written to metrics/metrics.json."""
    manifest = _load_dataset(root)
    embedder, svr_encoder, mapper, decoder = load_alignment_inputs(root)
    seed = derive_seed(cfg.seed, "eval")
    ev = cfg.eval

    metrics = {"config_hash": cfg.config_hash, "seed": cfg.seed}
    metrics["gap_study"] = eval_mod.gap_study(
        embedder, manifest, "val", repeats=3, seed=seed
    )
    for stage_name, key in (("svr", "svr_val_miou"), ("baseline", "baseline_val_miou")):
        marker = _marker_path(root, stage_name)
        if os.path.exists(marker):
            with open(marker) as f:
                metrics[key] = json.load(f)["metrics"].get("val_miou")

    entries = sweep_captions(manifest, "test", ev.sweep_captions, seed)
    jobs = [
        (e.caption.text, derive_seed(seed, "sweep", e.scene_id), False, None)
        for e in entries
    ]
    results = run_stage2_sweep(root, cfg, jobs, workers=ev.sweep_workers)
    mapper_primes = {text: mp for (text, _, mp, _, _) in results}
    report = eval_mod.distance_table(
        entries, mapper, mapper_primes, embedder, svr_encoder, manifest
    )
    os.makedirs(os.path.join(root, "metrics"), exist_ok=True)
    with open(os.path.join(root, "metrics", "distance_table.csv"), "w") as f:
        f.write(report.to_csv())
    pairs = [(r.d_mpft_fs, r.d_mft_fs) for r in report.rows]
    n_improved = sum(1 for a, b in pairs if a < b)
    n_worse = sum(1 for a, b in pairs if a > b)
    metrics["distance_table"] = {
        "mean": report.mean,
        "std": report.std,
        "n_captions": len(report.rows),
        "n_improved": n_improved,
        "sign_test_p": eval_mod.sign_test_p_value(n_improved, n_worse),
    }

    shapes = []
    latents = {}
    for (text, _, _, latent, _) in results:
        latents[text] = latent
    cons_entries = entries[: ev.consistency_captions]
    for e in cons_entries:
        shapes.append(
            (field_mod.field_closure(decoder, latents[e.caption.text]), e.caption)
        )
    candidates = sorted({e.caption.text for e in manifest.by_split("test")})
    metrics["retrieval_consistency"] = eval_mod.retrieval_consistency(
        shapes, embedder, candidates, seed=derive_seed(seed, "consistency")
    )

    gen_feats, gt_feats = [], []
    for e in cons_entries:
        gen_feats.append(
            eval_mod.mean_view_embedding(
                embedder, field_mod.field_closure(decoder, latents[e.caption.text]),
                derive_seed(seed, "fe-gen", e.scene_id), n_views=ev.frechet_views,
            ).numpy()
        )
        gt_feats.append(
            eval_mod.mean_view_embedding(
                embedder, scenes_mod.analytic_field(e.spec),
                derive_seed(seed, "fe-gt", e.scene_id), n_views=ev.frechet_views,
            ).numpy()
        )
    metrics["frechet_embedding"] = eval_mod.frechet_distance(
        np.stack(gen_feats), np.stack(gt_feats), shrinkage=True
    )

    div_entries = entries[: ev.diversity_captions]
    use_prior = ev.use_prior and os.path.exists(
        os.path.join(root, "checkpoints", "prior.ckpt")
    )
    div_jobs = [
        (e.caption.text, derive_seed(seed, "div", e.scene_id, s), use_prior, None)
        for e in div_entries
        for s in range(ev.diversity_seeds)
    ]
    div_results = run_stage2_sweep(root, cfg, div_jobs, workers=ev.sweep_workers)
    by_caption = {}
    for (text, _, _, latent, _) in div_results:
        by_caption.setdefault(text, []).append(latent)
    div_scores = []
    for text, lats in sorted(by_caption.items()):
        grids = [
            field_mod.snapshot_occupancy(decoder, lat, ev.grid_resolution)
            for lat in lats
        ]
        div_scores.append(eval_mod.diversity_score(grids))
    metrics["diversity"] = {
        "use_prior": use_prior,
        "mean": float(np.mean(div_scores)) if div_scores else None,
    }

    path = os.path.join(root, "metrics", "metrics.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(metrics, f, sort_keys=True, indent=1)
    os.replace(tmp, path)
    return {"metrics_path": "metrics/metrics.json"}


_STAGE_FNS = {
    "dataset": _dataset_stage,
    "embedder": _embedder_stage,
    "svr": _svr_stage,
    "baseline": _baseline_stage,
    "stage1": _stage1_stage,
    "prior": _prior_stage,
    "image": _image_stage,
    "eval": _eval_stage,
}
