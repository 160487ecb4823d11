"""Text-guided stylization: texture-only (split decoder, frozen geometry),
shape-and-texture with an occupancy prior loss, and SDS-guided stylization.

Background augmentation replaces background pixels with a fresh random color
each iteration so the optimizer can always tell object from backdrop.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .checkpoint import params_digest
from .embedder import embed_text
from .errors import ConfigError, ContractError, TrainingDivergence
from .field import ImplicitDecoder, OccupancyGrid, decode, field_closure, snapshot_occupancy
from .render import RenderedView, build_cull_grid, render_field, sample_camera
from .sds import SdsConfig, _sds_loop
from .seeding import derive_seed, generator

STYLE_MODES = ("texture", "shape_and_texture", "sds")


@dataclass
class StyleJob:
    base_decoder: ImplicitDecoder
    base_latent: torch.Tensor
    style_text: str
    mode: str
    epochs: int = 40       # paper-typical range is 30-50
    lambda_p: float = 1.0  # weight of the occupancy prior loss

    def __post_init__(self):
        if self.mode not in STYLE_MODES:
            raise ConfigError(f"mode must be one of {STYLE_MODES}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.mode == "texture" and self.base_decoder.topology != "split":
            raise ContractError("texture mode requires a split decoder topology")


@dataclass(frozen=True)
class StyleConfig:
    m_views: int = 4
    lr: float = 1e-3
    render_samples: int = 16
    resolution: int = 64
    snapshot_resolution: int = 32
    n_uniform_points: int = 4096
    n_band_points: int = 4096
    band_halfwidth: float = 0.2
    t_threshold: float = 0.5
    camera_radius: float = 2.0
    elevation_deg: tuple = (10.0, 50.0)
    cull_resolution: int = 20
    cull_threshold: float = 0.02

    @property
    def elevation_rad(self):
        return tuple(math.radians(e) for e in self.elevation_deg)


def prior_loss(
    reference: OccupancyGrid,
    params,
    latent: torch.Tensor,
    sample_points: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute occupancy drift from the pre-stylization snapshot,
    evaluated at the sample points (reference interpolated trilinearly).

    `params` may be a decoder (with `latent`) or a bare field callable.
    """
    if callable(params) and not hasattr(params, "cfg"):
        occ, _ = params(sample_points)
    else:
        occ, _ = decode(params, latent, sample_points)
    ref = reference.trilinear(sample_points.to(torch.float32)).to(occ.dtype)
    return (occ - ref).abs().mean()


def prior_sample_points(
    reference: OccupancyGrid, cfg: StyleConfig, seed: int
) -> torch.Tensor:
    """Uniform cube points plus points jittered inside near-surface cells of
    the reference grid (|occupancy - t| below the band halfwidth)."""
    rng = np.random.default_rng(seed)
    uniform = torch.from_numpy(
        rng.uniform(-0.5, 0.5, size=(cfg.n_uniform_points, 3))
    ).float()
    band = (reference.values - cfg.t_threshold).abs() < cfg.band_halfwidth
    idx = band.nonzero()
    if len(idx) == 0 or cfg.n_band_points == 0:
        extra = torch.from_numpy(
            rng.uniform(-0.5, 0.5, size=(cfg.n_band_points, 3))
        ).float()
        return torch.cat([uniform, extra])
    r = reference.resolution
    chosen = idx[torch.from_numpy(rng.integers(0, len(idx), cfg.n_band_points))]
    jitter = torch.from_numpy(rng.uniform(0.0, 1.0, size=(cfg.n_band_points, 3))).float()
    pts = -0.5 + (chosen.float() + jitter) / r
    return torch.cat([uniform, pts])


def augment_background(view: RenderedView, seed: int) -> RenderedView:
    """Replace background pixels with one seeded-random RGB triple;
    foreground pixels are untouched bit-for-bit."""
    rng = np.random.default_rng(int(seed))
    color = torch.from_numpy(rng.uniform(0.0, 1.0, 3)).to(view.rgb.dtype)
    rgb = torch.where(view.fg_mask[..., None], view.rgb, color.expand_as(view.rgb))
    return RenderedView(
        rgb=rgb,
        fg_mask=view.fg_mask,
        alpha=view.alpha,
        pose=view.pose,
        background_color=color,
    )


def _style_views(decoder, latent, cfg: StyleConfig, seed, epoch, jitter, cull):
    views = []
    for j in range(cfg.m_views):
        pose = sample_camera(
            derive_seed(seed, "style-cam", epoch, j),
            elevation_range=cfg.elevation_rad,
            radius=cfg.camera_radius,
            resolution=(cfg.resolution, cfg.resolution),
        )
        view = render_field(
            field_closure(decoder, latent), pose, torch.ones(3),
            cfg.render_samples, jitter=jitter, cull=cull,
        )
        views.append(augment_background(view, derive_seed(seed, "aug", epoch, j)))
    return views


def texture_stylize(job: StyleJob, embedder, cfg: StyleConfig, seed: int):
    """Optimize only the color pathway of a split decoder toward the style
    text; occupancy parameters stay bit-identical."""
    from .alignment import clip_consistency_loss

    if job.mode != "texture":
        raise ContractError("job mode must be 'texture'")
    decoder = copy.deepcopy(job.base_decoder)
    latent = job.base_latent.detach().clone()
    occ_digest_before = _occupancy_digest(decoder)
    for p in decoder.occupancy_parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        f_style = embed_text(embedder, job.style_text)
    opt = torch.optim.Adam(decoder.color_parameters(), lr=cfg.lr)
    jitter = generator(derive_seed(seed, "style-jitter"))
    # Geometry is frozen, so the empty-space grid is built once.
    cull = build_cull_grid(
        field_closure(decoder, latent),
        resolution=cfg.cull_resolution, threshold=cfg.cull_threshold,
    )
    rows = []
    for epoch in range(job.epochs):
        views = _style_views(decoder, latent, cfg, seed, epoch, jitter, cull)
        loss = clip_consistency_loss(f_style, views, embedder)
        if not torch.isfinite(loss):
            raise TrainingDivergence("texture stylization loss not finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((epoch, float(loss.detach())))
    if _occupancy_digest(decoder) != occ_digest_before:
        raise AssertionError("texture stylization drifted the geometry pathway")
    return decoder, rows


def _occupancy_digest(decoder: ImplicitDecoder) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in decoder.occupancy_parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def shape_texture_stylize(job: StyleJob, embedder, cfg: StyleConfig, seed: int):
    """Optimize the full decoder under style consistency plus the occupancy
    prior loss against a pre-stylization snapshot. Returns
    (decoder, reference grid, rows of (epoch, clip, prior))."""
    from .alignment import clip_consistency_loss

    if job.mode != "shape_and_texture":
        raise ContractError("job mode must be 'shape_and_texture'")
    decoder = copy.deepcopy(job.base_decoder)
    latent = job.base_latent.detach().clone()
    reference = snapshot_occupancy(decoder, latent, cfg.snapshot_resolution)
    with torch.no_grad():
        f_style = embed_text(embedder, job.style_text)
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.lr)
    jitter = generator(derive_seed(seed, "style-jitter"))
    rows = []
    for epoch in range(job.epochs):
        cull = build_cull_grid(
            field_closure(decoder, latent),
            resolution=cfg.cull_resolution, threshold=cfg.cull_threshold,
        )
        views = _style_views(decoder, latent, cfg, seed, epoch, jitter, cull)
        l_c = clip_consistency_loss(f_style, views, embedder)
        pts = prior_sample_points(reference, cfg, derive_seed(seed, "prior-pts", epoch))
        l_p = prior_loss(reference, decoder, latent, pts)
        loss = l_c + job.lambda_p * l_p
        if not torch.isfinite(loss):
            raise TrainingDivergence("shape-and-texture stylization loss not finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((epoch, float(l_c.detach()), float(l_p.detach())))
    return decoder, reference, rows


def sds_stylize(job: StyleJob, model, embedder, style_cfg: StyleConfig,
                sds_cfg: SdsConfig, seed: int):
    """SDS loop conditioned on the style text; optionally regularized by the
    occupancy prior loss (lambda_p > 0). Returns (decoder, reference, rows)."""
    if job.mode != "sds":
        raise ContractError("job mode must be 'sds'")
    with torch.no_grad():
        cond = embed_text(embedder, job.style_text)
    latent = job.base_latent.detach().clone()
    reference = snapshot_occupancy(
        job.base_decoder, latent, style_cfg.snapshot_resolution
    )
    prior_reg = None
    if job.lambda_p > 0:
        counter = {"epoch": 0}

        def prior_reg(dec):
            pts = prior_sample_points(
                reference, style_cfg, derive_seed(seed, "sds-prior-pts", counter["epoch"])
            )
            counter["epoch"] += 1
            return job.lambda_p * prior_loss(reference, dec, latent, pts)

    cfg = sds_cfg
    if cfg.epochs != job.epochs:
        cfg = SdsConfig(
            t_min=cfg.t_min, t_max=cfg.t_max, guidance_scale=cfg.guidance_scale,
            epochs=job.epochs, views_per_epoch=cfg.views_per_epoch,
            learning_rate=cfg.learning_rate, render_samples=cfg.render_samples,
            camera_radius=cfg.camera_radius, elevation_deg=cfg.elevation_deg,
            cull_resolution=cfg.cull_resolution, cull_threshold=cfg.cull_threshold,
        )
    resolution = getattr(model, "resolution", style_cfg.resolution)
    decoder, rows = _sds_loop(
        job.base_decoder, latent, cond, model, cfg, seed, resolution,
        prior_reg=prior_reg,
    )
    return decoder, reference, rows
