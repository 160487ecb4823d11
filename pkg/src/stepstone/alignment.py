"""Two-stage feature-space alignment.

Stage 1 trains a mapper from image embeddings into the shape latent space by
latent regression, while the decoder is fine-tuned with a background loss
(push colors on object-free rays toward white) plus the reconstruction loss.
The two optimizations are gradient-isolated: regression gradients never
touch the decoder or encoders, render gradients never touch the mapper.

Stage 2 is per-text test-time optimization: with the decoder frozen, the
mapper is fine-tuned for a few iterations so rendered views of the decoded
shape agree with the target embedding (the text embedding, or a blend with a
diffusion-prior sample for diversified generation).
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, params_digest, save_module
from .diffusion import sample_prior
from .embedder import embed_image, embed_text
from .errors import BackgroundFreeWarning, ConfigError, ContractError, TrainingDivergence
from .field import ImplicitDecoder, decode, field_closure, snapshot_field
from .render import (
    build_cull_grid,
    pixel_rays,
    render_field,
    sample_camera,
    _sphere_clip,
)
from .scenes import load_cameras, load_view
from .seeding import derive_seed, generator
from .svr import encode_image


@dataclass(frozen=True)
class AlignmentConfig:
    lambda_m: float = 0.5
    lambda_bg: float = 10.0
    t_threshold: float = 0.5
    m_views: int = 10
    tau: float = 0.5
    stage1_epochs: int = 400
    stage1_lr: float = 1e-4
    stage2_iters: int = 20
    # Desk-scale knobs below (the stage-2 optimizer reuses the stage-1
    # learning rate; decoder fine-tuning runs a fixed step budget).
    stage2_lr: float = 1e-4
    mapper_hidden: int = 256
    stage1_batch: int = 256
    d_steps: int = 300
    d_lr: float = 1e-3
    svr_loss_weight: float = 1.0
    d_sup_views: int = 2
    d_rays_per_view: int = 192
    d_samples_per_ray: int = 32
    render_samples: int = 16
    n_bg_points: int = 512
    bg_mask_samples: int = 24
    bg_max_rays: int = 1024
    camera_radius: float = 2.0
    elevation_deg: tuple = (10.0, 50.0)
    cull_resolution: int = 20
    cull_threshold: float = 0.02

    def __post_init__(self):
        positives = {
            "t_threshold": self.t_threshold,
            "m_views": self.m_views,
            "stage1_epochs": self.stage1_epochs,
            "stage1_lr": self.stage1_lr,
            "stage2_iters": self.stage2_iters,
        }
        for name, v in positives.items():
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        # The loss weights may be zero: the w/o-background-loss and
        # w/o-regression ablations are part of the evaluation protocol.
        if self.lambda_m < 0 or self.lambda_bg < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError("tau must lie in [0, 1]")

    @property
    def elevation_rad(self):
        return tuple(math.radians(e) for e in self.elevation_deg)


MAPPER_LAYERS = 12


class Mapper(nn.Module):
    """Embedding-to-shape-latent mapper: exactly 12 fully-connected layers
    with leaky-rectifier activations between them."""

    def __init__(self, embed_dim: int = 64, latent_dim: int = 128, hidden: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        dims = [embed_dim] + [hidden] * (MAPPER_LAYERS - 1) + [latent_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(MAPPER_LAYERS)
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = f
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i + 1 < len(self.layers):
                h = F.leaky_relu(h, negative_slope=0.01)
        return h


def map_embedding(mapper: Mapper, f: torch.Tensor) -> torch.Tensor:
    """Map an embedding (d_e,) or batch (B, d_e) into the shape space."""
    if f.shape[-1] != mapper.embed_dim:
        raise ContractError(
            f"embedding dim {f.shape[-1]} != mapper input dim {mapper.embed_dim}"
        )
    single = f.dim() == 1
    out = mapper(f[None] if single else f)
    return out[0] if single else out


def mapper_loss(mapper: Mapper, images: torch.Tensor, f_i: torch.Tensor, svr_encoder):
    """Sum over the batch of squared latent-regression gaps
    || E_S(I) - M(f_I) ||^2; encoder output is detached (gradient stop)."""
    with torch.no_grad():
        f_s = encode_image(svr_encoder, images)
    mapped = map_embedding(mapper, f_i)
    return ((f_s - mapped) ** 2).sum()


def regression_gap(mapper: Mapper, f_i: torch.Tensor, f_s: torch.Tensor):
    """Mean squared gap on precomputed pairs (no encoder call)."""
    mapped = map_embedding(mapper, f_i)
    return ((f_s - mapped) ** 2).sum(-1).mean()


# ---------------------------------------------------------------------------
# Background loss
# ---------------------------------------------------------------------------

def background_loss(
    params,
    latent: torch.Tensor,
    pose,
    n_bg_points: int,
    t_threshold: float = 0.5,
    mask_samples: int = 32,
    max_rays: int = None,
):
    """Mean over sampled background points of ||D_c(p) - white||^2.

    Point selection (deterministic): take the sphere-hitting rays of the
    pose (an evenly spaced subset of at most max_rays when given), flag rays
    whose midpoint samples never exceed t_threshold, lay out those rays'
    midpoint samples ray-major, and keep n_bg_points evenly spaced entries.
    Differentiable w.r.t. the decoder and latent through the color term; the
    flagging itself carries no gradient.
    """
    if n_bg_points < 1:
        raise ContractError("n_bg_points must be >= 1")
    field = params if callable(params) and not hasattr(params, "cfg") else (
        field_closure(params, latent)
    )
    dtype = params.dtype if hasattr(params, "dtype") else torch.float32
    origin, dirs = pixel_rays(pose, None)
    origin, dirs = origin.to(dtype), dirs.to(dtype)
    hit, near, far = _sphere_clip(origin, dirs, 0.88)
    h_idx = hit.nonzero(as_tuple=True)[0]
    if max_rays is not None and len(h_idx) > max_rays:
        step = (len(h_idx) + max_rays - 1) // max_rays
        h_idx = h_idx[::step]
    if len(h_idx) == 0:
        warnings.warn("no candidate rays for background loss", BackgroundFreeWarning)
        return torch.zeros((), dtype=dtype)
    s = mask_samples
    t_vals = near[h_idx][:, None] + (
        (torch.arange(s, dtype=dtype)[None, :] + 0.5) / s
    ) * (far[h_idx] - near[h_idx])[:, None]
    pts = origin.view(1, 1, 3) + t_vals[..., None] * dirs[h_idx][:, None, :]
    with torch.no_grad():
        occ, _ = field(pts.reshape(-1, 3))
        bg_rays = ~(occ.reshape(len(h_idx), s) > t_threshold).any(dim=-1)
    if not bool(bg_rays.any()):
        warnings.warn(
            "object fills the frame: no background rays", BackgroundFreeWarning
        )
        return torch.zeros((), dtype=dtype)
    candidates = pts[bg_rays].reshape(-1, 3)
    if candidates.shape[0] > n_bg_points:
        sel = torch.linspace(0, candidates.shape[0] - 1, n_bg_points).long()
        candidates = candidates[sel]
    _, colors = field(candidates)
    return ((colors - 1.0) ** 2).sum(-1).mean()


def clip_consistency_loss(target: torch.Tensor, views, embedder) -> torch.Tensor:
    """Negated sum over views of <target, E_I(R_i)/||E_I(R_i)||>.

    The sign makes gradient descent increase text/render agreement;
    perfectly aligned views give -len(views), orthogonal views give 0.
    """
    if not views:
        raise ContractError("views must be nonempty")
    rgb = torch.stack([v.rgb for v in views])
    feats = embed_image(embedder, rgb.clamp(0.0, 1.0))
    return -(feats @ target).sum()


def diversified_target(
    f_T: torch.Tensor, prior, tau: float, seed: int
) -> torch.Tensor:
    """Blend a diffusion-prior sample with the text embedding:
    normalize(tau * f_{T->I} + (1 - tau) * f_T). tau=0 returns f_T exactly;
    tau=1 returns the normalized prior sample."""
    if not (0.0 <= tau <= 1.0):
        raise ContractError("tau must lie in [0, 1]")
    if tau == 0.0:
        return f_T.clone()
    sample = sample_prior(prior, f_T, derive_seed(seed, "target"))
    if tau == 1.0:
        return sample
    return F.normalize(tau * sample + (1.0 - tau) * f_T, dim=-1)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def precompute_pairs(manifest, embedder, svr_encoder, split="train"):
    """Per-view (f_I, f_S) pairs plus caption embeddings, frozen encoders."""
    f_i, f_s, f_t, texts = [], [], [], []
    for e in manifest.by_split(split):
        cams = load_cameras(manifest, e)
        with torch.no_grad():
            ft = embed_text(embedder, e.caption)
        for k in range(len(e.view_paths)):
            img = load_view(manifest, e, k)
            with torch.no_grad():
                f_i.append(embed_image(embedder, img))
                f_s.append(encode_image(svr_encoder, img))
            f_t.append(ft)
            texts.append(e.caption.text)
    return torch.stack(f_i), torch.stack(f_s), torch.stack(f_t), texts


def stage1_train(
    manifest,
    embedder,
    svr_encoder,
    decoder: ImplicitDecoder,
    cfg: AlignmentConfig,
    seed: int,
    expect_digests: dict = None,
):
    """Train the mapper (regression) and fine-tune the decoder (background +
    reconstruction), gradient-isolated. Returns (mapper, decoder', metrics).

    With lambda_m == 0 the mapper is never stepped; with lambda_bg == 0 and
    svr_loss_weight == 0 the decoder is never stepped (isolation contract).
    """
    for name, module in (("embedder", embedder), ("svr_encoder", svr_encoder)):
        if expect_digests and name in expect_digests:
            if params_digest(module) != expect_digests[name]:
                raise ContractError(f"{name} digest mismatch (frozen input changed)")

    f_i, f_s, _, _ = precompute_pairs(manifest, embedder, svr_encoder, "train")
    torch.manual_seed(derive_seed(seed, "mapper-init"))
    mapper = Mapper(
        embed_dim=f_i.shape[-1], latent_dim=f_s.shape[-1], hidden=cfg.mapper_hidden
    )
    decoder = copy.deepcopy(decoder)

    mapper_history = []
    if cfg.lambda_m > 0:
        opt_m = torch.optim.Adam(mapper.parameters(), lr=cfg.stage1_lr)
        rng = np.random.default_rng(derive_seed(seed, "stage1-batches"))
        n = f_i.shape[0]
        for epoch in range(cfg.stage1_epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.stage1_batch):
                idx = order[start : start + cfg.stage1_batch]
                loss = cfg.lambda_m * regression_gap(mapper, f_i[idx], f_s[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergence("stage-1 mapper loss not finite")
                opt_m.zero_grad()
                loss.backward()
                opt_m.step()
                total += float(loss.detach()) * len(idx)
            mapper_history.append(total / n)

    bg_history = []
    if cfg.lambda_bg > 0 or cfg.svr_loss_weight > 0:
        _finetune_decoder(manifest, decoder, f_s, cfg, seed, bg_history)

    metrics = {
        "mapper_loss_history": mapper_history,
        "decoder_loss_history": bg_history,
    }
    return mapper, decoder, metrics


def _finetune_decoder(manifest, decoder, f_s_views, cfg, seed, history):
    """Decoder fine-tuning under svr_loss_weight * L_D + lambda_bg * L_bg."""
    from .svr import _ray_points, hit_pixels
    from .render import _composite

    entries = manifest.by_split("train")
    n_views = len(entries[0].view_paths)
    opt_d = torch.optim.Adam(decoder.parameters(), lr=cfg.d_lr)
    rng = np.random.default_rng(derive_seed(seed, "stage1-d"))
    jitter = generator(derive_seed(seed, "stage1-d-jitter"))
    cams_cache, img_cache, hits_cache = {}, {}, {}

    for step in range(cfg.d_steps):
        si = int(rng.integers(0, len(entries)))
        e = entries[si]
        if si not in cams_cache:
            cams_cache[si] = load_cameras(manifest, e)
            img_cache[si] = [
                load_view(manifest, e, k) for k in range(n_views)
            ]
            hits_cache[si] = [hit_pixels(c) for c in cams_cache[si]]
        cams = cams_cache[si]
        k_in = int(rng.integers(0, n_views))
        az = cams[k_in].azimuth
        latent = f_s_views[si * n_views + k_in].detach()
        loss = torch.zeros(())
        if cfg.svr_loss_weight > 0:
            others = [v for v in range(n_views) if v != k_in]
            sup = rng.choice(others, size=min(cfg.d_sup_views, len(others)), replace=False)
            for v in sup:
                pose = cams[v].rotated_about_z(az)
                hit = hits_cache[si][v]
                sel = hit[
                    torch.from_numpy(
                        rng.choice(len(hit), size=min(cfg.d_rays_per_view, len(hit)),
                                   replace=False)
                    )
                ]
                pts, dt = _ray_points(pose, sel, cfg.d_samples_per_ray, jitter)
                occ, rgb = decode(decoder, latent, pts)
                occ = occ.reshape(len(sel), cfg.d_samples_per_ray)
                rgb = rgb.reshape(len(sel), cfg.d_samples_per_ray, 3)
                color, acc = _composite(occ, rgb, dt[:, None], torch.ones(3),
                                        occ.dtype)
                gt = img_cache[si][v].reshape(-1, 3)[sel]
                gt_mask = (gt < 1.0).any(dim=-1).float()
                loss = loss + cfg.svr_loss_weight * (
                    (color - gt).abs().mean()
                    + 0.5 * F.binary_cross_entropy(acc.clamp(0, 1), gt_mask)
                )
        if cfg.lambda_bg > 0:
            pose = sample_camera(
                derive_seed(seed, "stage1-bg-cam", step),
                elevation_range=cfg.elevation_rad,
                radius=cfg.camera_radius,
                resolution=(manifest.resolution, manifest.resolution),
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BackgroundFreeWarning)
                l_bg = background_loss(
                    decoder, latent, pose, cfg.n_bg_points,
                    t_threshold=cfg.t_threshold,
                    mask_samples=cfg.bg_mask_samples,
                    max_rays=cfg.bg_max_rays,
                )
            loss = loss + cfg.lambda_bg * l_bg
        if not torch.isfinite(loss):
            raise TrainingDivergence("stage-1 decoder loss not finite")
        opt_d.zero_grad()
        loss.backward()
        opt_d.step()
        history.append(float(loss.detach()))


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def stage2_align(
    text,
    mapper: Mapper,
    decoder: ImplicitDecoder,
    embedder,
    cfg: AlignmentConfig,
    seed: int,
    use_prior: bool = False,
    prior=None,
    tau: float = None,
):
    """Per-text test-time optimization of the mapper with the decoder frozen.

    Returns (mapper_prime, target, log_rows); log rows are
    (iteration, clip_loss, bg_loss, total).
    """
    d_digest = params_digest(decoder)
    with torch.no_grad():
        f_t = embed_text(embedder, text)
    if use_prior:
        if prior is None:
            raise ContractError("use_prior requires a trained prior")
        target = diversified_target(
            f_t, prior, cfg.tau if tau is None else tau, seed
        )
    else:
        target = f_t
    mapper_prime = copy.deepcopy(mapper)
    opt = torch.optim.Adam(mapper_prime.parameters(), lr=cfg.stage2_lr)
    jitter = generator(derive_seed(seed, "stage2-jitter"))
    resolution = embedder.cfg.image_resolution
    rows = []
    for it in range(cfg.stage2_iters):
        latent = map_embedding(mapper_prime, target)
        cull = build_cull_grid(
            field_closure(decoder, latent.detach()),
            resolution=cfg.cull_resolution, threshold=cfg.cull_threshold,
        )
        poses = [
            sample_camera(
                derive_seed(seed, "stage2-cam", it, j),
                elevation_range=cfg.elevation_rad,
                radius=cfg.camera_radius,
                resolution=(resolution, resolution),
            )
            for j in range(cfg.m_views)
        ]
        views = [
            render_field(
                field_closure(decoder, latent), pose, torch.ones(3),
                cfg.render_samples, jitter=jitter, cull=cull,
            )
            for pose in poses
        ]
        l_c = clip_consistency_loss(target, views, embedder)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BackgroundFreeWarning)
            l_bg = sum(
                background_loss(
                    decoder, latent, pose, cfg.n_bg_points,
                    t_threshold=cfg.t_threshold,
                    mask_samples=cfg.bg_mask_samples,
                    max_rays=cfg.bg_max_rays,
                )
                for pose in poses
            ) / len(poses)
        loss = l_c + cfg.lambda_bg * l_bg
        if not torch.isfinite(loss):
            raise TrainingDivergence("stage-2 loss not finite", {"iteration": it})
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((it, float(l_c.detach()), float(l_bg.detach()) if hasattr(l_bg, 'detach') else float(l_bg), float(loss.detach())))
    assert params_digest(decoder) == d_digest, "stage-2 mutated the frozen decoder"
    return mapper_prime, target, rows


@dataclass
class GenerationResult:
    latent: torch.Tensor
    mapper_prime: Mapper
    target: torch.Tensor
    decoder: ImplicitDecoder
    strip: torch.Tensor
    log_rows: list


def generate(
    text,
    mapper: Mapper,
    decoder: ImplicitDecoder,
    embedder,
    cfg: AlignmentConfig,
    seed: int,
    use_prior: bool = False,
    prior=None,
    tau: float = None,
    strip_frames: int = 6,
    strip_resolution: int = 64,
) -> GenerationResult:
    """Text -> shape: stage-2 alignment, decode, turntable strip."""
    from .render import turntable_strip

    mapper_prime, target, rows = stage2_align(
        text, mapper, decoder, embedder, cfg, seed,
        use_prior=use_prior, prior=prior, tau=tau,
    )
    with torch.no_grad():
        latent = map_embedding(mapper_prime, target)
    strip = turntable_strip(
        field_closure(decoder, latent),
        n_frames=strip_frames,
        resolution=strip_resolution,
        samples_per_ray=max(cfg.render_samples, 32),
    )
    return GenerationResult(
        latent=latent, mapper_prime=mapper_prime, target=target,
        decoder=decoder, strip=strip, log_rows=rows,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_mapper(path: str, mapper: Mapper, extra_meta: dict = None) -> None:
    meta = {
        "kind": "mapper",
        "embed_dim": mapper.embed_dim,
        "latent_dim": mapper.latent_dim,
        "hidden": mapper.hidden,
    }
    meta.update(extra_meta or {})
    save_module(path, mapper, meta)


def load_mapper(path: str):
    state, meta = load_module_state(path)
    if meta.get("kind") != "mapper":
        raise ContractError(f"{path} is not a mapper checkpoint")
    mapper = Mapper(
        embed_dim=meta["embed_dim"], latent_dim=meta["latent_dim"],
        hidden=meta["hidden"],
    )
    mapper.load_state_dict(state)
    return mapper, meta
