"""Score Distillation Sampling: custom gradient through rendered views.

The gradient w.r.t. a rendered image R is w(t) * (eps_hat - eps) with
w(t) = sqrt(alpha_bar_t), where eps_hat is the frozen image model's noise
prediction at z_t = add_noise(R, t, eps). The denoiser Jacobian is never
backpropagated; chaining into decoder parameters happens through the
renderer's autodiff via a detached-gradient surrogate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch

from .checkpoint import params_digest
from .diffusion import add_noise
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergence
from .field import ImplicitDecoder, field_closure
from .render import build_cull_grid, render_field, sample_camera
from .seeding import derive_seed, generator


@dataclass(frozen=True)
class SdsConfig:
    t_min: int = 20
    t_max: int = 980
    guidance_scale: float = 7.5
    epochs: int = 40
    views_per_epoch: int = 1
    learning_rate: float = 1e-3
    render_samples: int = 16
    camera_radius: float = 2.0
    elevation_deg: tuple = (10.0, 50.0)
    cull_resolution: int = 20
    cull_threshold: float = 0.02

    def __post_init__(self):
        if not (1 <= self.t_min < self.t_max):
            raise ConfigError("require 1 <= t_min < t_max")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def elevation_rad(self):
        return tuple(math.radians(e) for e in self.elevation_deg)


class EchoStub:
    """Test stub whose prediction echoes the externally injected noise, so
    the SDS residual vanishes identically."""

    is_trained = True
    wants_injected_eps = True

    def __init__(self, schedule):
        self.schedule = schedule
        self._eps = None

    def inject_eps(self, eps: torch.Tensor) -> None:
        self._eps = eps

    def __call__(self, z, cond, t):
        return self._eps[None]


def _predict(model, z_t, cond, t, guidance_scale):
    if guidance_scale is None or guidance_scale == 1.0 or getattr(
        model, "wants_injected_eps", False
    ):
        return model(z_t[None], cond[None], torch.tensor([int(t)]))[0]
    eps_c = model(z_t[None], cond[None], torch.tensor([int(t)]))[0]
    eps_u = model(z_t[None], torch.zeros_like(cond)[None], torch.tensor([int(t)]))[0]
    return eps_u + guidance_scale * (eps_c - eps_u)


def sds_gradient(
    model,
    view_rgb: torch.Tensor,
    caption_embedding: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    schedule=None,
    guidance_scale: float = None,
) -> torch.Tensor:
    """Gradient of the distillation objective w.r.t. the rendered image:
    w(t) * (eps_hat(z_t) - eps), detached from the model. The caller chains
    this through dR/dtheta with its own autodiff."""
    if not getattr(model, "is_trained", False):
        raise CheckpointError("image diffusion model is untrained")
    schedule = schedule if schedule is not None else model.schedule
    if eps.shape != view_rgb.shape:
        raise ContractError("eps must match the view's shape")
    with torch.no_grad():
        z_t = add_noise(view_rgb.detach(), t, eps, schedule)
        eps_hat = _predict(model, z_t, caption_embedding, t, guidance_scale)
    w = math.sqrt(float(schedule.alpha_bar[t - 1]))
    return w * (eps_hat - eps)


def _sds_loop(
    decoder: ImplicitDecoder,
    latent: torch.Tensor,
    cond_emb: torch.Tensor,
    model,
    cfg: SdsConfig,
    seed: int,
    resolution: int,
    prior_reg=None,
    trainable_params=None,
):
    """Shared refinement loop; returns (decoder, diagnostics rows).

    prior_reg: optional callable(decoder) -> scalar regularizer added to the
    surrogate loss each epoch (used by prior-regularized stylization).
    """
    if not getattr(model, "is_trained", False):
        raise CheckpointError("image diffusion model is untrained")
    if not (cfg.t_max <= model.schedule.T):
        raise ConfigError(f"t_max {cfg.t_max} exceeds schedule T {model.schedule.T}")
    decoder = copy.deepcopy(decoder)
    if cfg.epochs == 0:
        return decoder, []
    latent = latent.detach().clone()
    params = trainable_params(decoder) if trainable_params else list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    g_t = generator(derive_seed(seed, "sds-t"))
    g_eps = generator(derive_seed(seed, "sds-eps"))
    jitter = generator(derive_seed(seed, "sds-jitter"))
    rows = []
    last_good = copy.deepcopy(decoder.state_dict())
    for epoch in range(cfg.epochs):
        cull = build_cull_grid(
            field_closure(decoder, latent),
            resolution=cfg.cull_resolution, threshold=cfg.cull_threshold,
        )
        surrogate = torch.zeros(())
        grad_norm = 0.0
        t_used = []
        for v in range(cfg.views_per_epoch):
            cam_seed = derive_seed(seed, "sds-cam", epoch, v)
            pose = sample_camera(
                cam_seed,
                elevation_range=cfg.elevation_rad,
                radius=cfg.camera_radius,
                resolution=(resolution, resolution),
            )
            view = render_field(
                field_closure(decoder, latent), pose, torch.ones(3),
                cfg.render_samples, jitter=jitter, cull=cull,
            )
            t = int(torch.randint(cfg.t_min, cfg.t_max + 1, (1,), generator=g_t))
            eps = torch.randn(view.rgb.shape, generator=g_eps)
            if getattr(model, "wants_injected_eps", False):
                model.inject_eps(eps)
            grad = sds_gradient(
                model, view.rgb, cond_emb, t, eps,
                guidance_scale=cfg.guidance_scale,
            )
            surrogate = surrogate + (grad.detach() * view.rgb).sum()
            grad_norm += float(grad.norm())
            t_used.append(t)
        if prior_reg is not None:
            surrogate = surrogate + prior_reg(decoder)
        opt.zero_grad()
        surrogate.backward()
        opt.step()
        if not all(torch.isfinite(p).all() for p in decoder.parameters()):
            decoder.load_state_dict(last_good)
            raise TrainingDivergence(
                "NaN in decoder parameters during SDS; last-good state restored",
                {"epoch": epoch, "decoder": decoder},
            )
        last_good = copy.deepcopy(decoder.state_dict())
        rows.append((epoch, grad_norm, t_used, cam_seed))
    return decoder, rows


def sds_refine(
    decoder: ImplicitDecoder,
    latent: torch.Tensor,
    text,
    model,
    embedder,
    cfg: SdsConfig,
    seed: int,
):
    """Fine-tune the full decoder so renders move toward the image model's
    high-density region for the caption. The latent is frozen; topology
    preservation comes from the initialization, not a loss."""
    from .embedder import embed_text

    with torch.no_grad():
        cond = embed_text(embedder, text)
    resolution = getattr(model, "resolution", embedder.cfg.image_resolution)
    return _sds_loop(decoder, latent, cond, model, cfg, seed, resolution)
