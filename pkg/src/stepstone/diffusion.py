"""Toy denoising diffusion models and shared schedule machinery.

Two models: an embedding-space prior that samples plausible image-space
embeddings conditioned on a text embedding (used to diversify stage-2
targets), and a text-conditioned image denoiser supplying noise predictions
for score distillation. Both operate in raw value space; the image model is
trained directly on [0, 1] renders so its noise predictions line up with the
renderer's output without rescaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, save_module
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergence
from .seeding import derive_seed, generator


@dataclass
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str
    betas: torch.Tensor       # (T,) float64
    alpha_bar: torch.Tensor   # (T,) float64, cumulative products

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }

    @staticmethod
    def from_json(d: dict) -> "DiffusionSchedule":
        return make_schedule(d["T"], d["beta_start"], d["beta_end"], d["kind"])


def make_schedule(
    T: int, beta_start: float, beta_end: float, shape: str = "linear"
) -> DiffusionSchedule:
    """Precompute the cumulative-product noise schedule for t = 1..T."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("require 0 < beta_start <= beta_end < 1")
    if T < 1:
        raise ConfigError("T must be >= 1")
    if shape == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif shape == "cosine":
        s = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = (1 - alpha_bar[1:] / alpha_bar[:-1]).clamp(beta_start, beta_end)
    else:
        raise ConfigError(f"unknown schedule shape {shape!r}")
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    if not bool((alpha_bar[1:] < alpha_bar[:-1]).all()):
        raise ConfigError("alpha_bar must be strictly decreasing")
    if not bool(((alpha_bar > 0) & (alpha_bar < 1)).all()):
        raise ConfigError("alpha_bar must lie in (0, 1)")
    return DiffusionSchedule(
        T=T, beta_start=beta_start, beta_end=beta_end, kind=shape,
        betas=betas, alpha_bar=alpha_bar,
    )


def add_noise(
    x: torch.Tensor, t: int, eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps, elementwise.

    t is 1-indexed (1..T).
    """
    if not (1 <= t <= schedule.T):
        raise ContractError(f"t={t} outside 1..{schedule.T}")
    if eps.shape != x.shape:
        raise ContractError("eps must match x's shape")
    ab = float(schedule.alpha_bar[t - 1])
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


def _time_embedding(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t/T, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32) * (-math.log(1000.0) / max(half - 1, 1))
    )
    ang = t_frac[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class EmbeddingPrior(nn.Module):
    """Residual MLP denoiser over embedding vectors, conditioned on the text
    embedding and the diffusion step."""

    TIME_DIM = 32

    def __init__(self, embed_dim: int = 64, hidden: int = 256, schedule=None):
        super().__init__()
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.schedule = schedule or make_schedule(100, 1e-3, 0.1, "linear")
        in_dim = embed_dim * 2 + self.TIME_DIM
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, embed_dim),
        )
        self.is_trained = False

    def forward(self, z: torch.Tensor, cond: torch.Tensor, t: torch.Tensor):
        # z: (B, d); cond: (B, d); t: (B,) 1-indexed steps
        t_emb = _time_embedding(t.float() / self.schedule.T, self.TIME_DIM)
        return self.net(torch.cat([z, cond, t_emb], dim=-1))


class ImageDenoiser(nn.Module):
    """Small conv denoiser at dataset resolution, conditioned on a caption
    embedding (classifier-free: zero embedding = unconditional) and t."""

    TIME_DIM = 32

    def __init__(self, resolution: int = 64, cond_dim: int = 64, channels: int = 24,
                 schedule=None):
        super().__init__()
        self.resolution = resolution
        self.cond_dim = cond_dim
        self.channels = channels
        self.schedule = schedule or make_schedule(1000, 1e-4, 0.02, "linear")
        c = channels
        self.inp = nn.Conv2d(3, c, 3, padding=1)
        self.enc1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.cond_proj = nn.Linear(cond_dim + self.TIME_DIM, 2 * c)
        self.dec2 = nn.Conv2d(2 * c + c, c, 3, padding=1)
        self.dec1 = nn.Conv2d(c + c, c, 3, padding=1)
        self.out = nn.Conv2d(c, 3, 3, padding=1)
        self.is_trained = False

    def forward(self, z: torch.Tensor, cond: torch.Tensor, t: torch.Tensor):
        # z: (B, H, W, 3); cond: (B, cond_dim); t: (B,)
        if z.shape[-1] != 3 or z.shape[1] != self.resolution:
            raise ContractError("z must be (B, R, R, 3) at the model resolution")
        x = z.permute(0, 3, 1, 2)
        h0 = F.silu(self.inp(x))
        h1 = F.silu(self.enc1(h0))
        h2 = F.silu(self.enc2(h1))
        t_emb = _time_embedding(t.float() / self.schedule.T, self.TIME_DIM)
        film = self.cond_proj(torch.cat([cond, t_emb], dim=-1))
        h = F.silu(self.mid(h2) + film[:, :, None, None])
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec2(torch.cat([h, h1], dim=1)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec1(torch.cat([h, h0], dim=1)))
        return self.out(h).permute(0, 2, 3, 1)


def predict_noise(model, z_t: torch.Tensor, caption_embedding: torch.Tensor, t: int,
                  guidance_scale: float = None) -> torch.Tensor:
    """Noise prediction for one sample; classifier-free guidance blends the
    conditional and unconditional predictions when a scale is given."""
    if not (1 <= int(t) <= model.schedule.T):
        raise ContractError(f"t={t} outside 1..{model.schedule.T}")
    zb = z_t[None]
    tb = torch.tensor([int(t)])
    cond = caption_embedding[None]
    with torch.no_grad():
        eps_c = model(zb, cond, tb)[0]
        if guidance_scale is None or guidance_scale == 1.0:
            out = eps_c
        else:
            eps_u = model(zb, torch.zeros_like(cond), tb)[0]
            out = eps_u + guidance_scale * (eps_c - eps_u)
    if out.shape != z_t.shape:
        raise ContractError("noise prediction shape mismatch")
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorTrainConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1
    hidden: int = 256
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    min_improvement: float = 0.5  # val loss must drop below this fraction of baseline


@dataclass(frozen=True)
class ImageTrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: int = 24
    steps: int = 2500
    batch_size: int = 16
    lr: float = 2e-3
    cond_dropout: float = 0.1
    min_improvement: float = 0.5


def _denoising_loss(model, x, cond, rng_t, rng_eps):
    b = x.shape[0]
    t = torch.randint(
        1, model.schedule.T + 1, (b,), generator=rng_t
    )
    eps = torch.randn(x.shape, generator=rng_eps, dtype=x.dtype)
    ab = model.schedule.alpha_bar.to(x.dtype)[t - 1]
    shape = (b,) + (1,) * (x.dim() - 1)
    z = ab.sqrt().reshape(shape) * x + (1 - ab).sqrt().reshape(shape) * eps
    pred = model(z, cond, t)
    return F.mse_loss(pred, eps)


def train_diffusion(kind: str, dataset_pairs, cfg, seed: int):
    """Standard denoising objective.

    kind="embedding_prior": dataset_pairs = (f_I (N, d), f_T (N, d)).
    kind="image_model": dataset_pairs = (images (N, H, W, 3) in [0, 1],
    caption embeddings (N, d)).

    Returns (model, metrics). The validation loss must fall below
    min_improvement * untrained baseline, else TrainingDivergence.
    """
    if kind not in ("embedding_prior", "image_model"):
        raise ConfigError(f"unknown diffusion kind {kind!r}")
    x_all, cond_all = dataset_pairs
    n = x_all.shape[0]
    n_val = max(4, n // 10)
    x_val, cond_val = x_all[:n_val], cond_all[:n_val]
    x_tr, cond_tr = x_all[n_val:], cond_all[n_val:]

    torch.manual_seed(derive_seed(seed, kind, "init"))
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, "linear")
    if kind == "embedding_prior":
        model = EmbeddingPrior(
            embed_dim=x_all.shape[-1], hidden=cfg.hidden, schedule=schedule
        )
    else:
        model = ImageDenoiser(
            resolution=x_all.shape[1], cond_dim=cond_all.shape[-1],
            channels=cfg.channels, schedule=schedule,
        )

    def val_loss():
        g_t = generator(derive_seed(seed, kind, "val-t"))
        g_e = generator(derive_seed(seed, kind, "val-eps"))
        with torch.no_grad():
            return float(_denoising_loss(model, x_val, cond_val, g_t, g_e))

    baseline = val_loss()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(seed, kind, "batches"))
    g_t = generator(derive_seed(seed, kind, "t"))
    g_e = generator(derive_seed(seed, kind, "eps"))
    g_drop = np.random.default_rng(derive_seed(seed, kind, "dropout"))
    for step in range(cfg.steps):
        idx = rng.choice(len(x_tr), size=min(cfg.batch_size, len(x_tr)), replace=False)
        x = x_tr[idx]
        cond = cond_tr[idx].clone()
        if kind == "image_model" and cfg.cond_dropout > 0:
            drop = torch.from_numpy(
                g_drop.random(len(idx)) < cfg.cond_dropout
            )
            cond[drop] = 0.0
        loss = _denoising_loss(model, x, cond, g_t, g_e)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"{kind} loss not finite", {"step": step})
        opt.zero_grad()
        loss.backward()
        opt.step()

    final = val_loss()
    if cfg.min_improvement is not None and final > cfg.min_improvement * baseline:
        raise TrainingDivergence(
            f"{kind} val loss {final:.4f} did not halve the untrained "
            f"baseline {baseline:.4f}",
            {"baseline": baseline, "final": final},
        )
    model.is_trained = True
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, {"baseline_val_loss": baseline, "val_loss": final}


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_prior(prior: EmbeddingPrior, f_T: torch.Tensor, seed: int) -> torch.Tensor:
    """Full ancestral reverse diffusion conditioned on f_T, renormalized to
    unit norm. Deterministic per seed."""
    if not getattr(prior, "is_trained", False):
        raise CheckpointError("embedding prior is untrained")
    sched = prior.schedule
    g = generator(derive_seed(seed, "prior-sample"))
    z = torch.randn(prior.embed_dim, generator=g)
    cond = f_T[None]
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            beta = float(sched.betas[t - 1])
            alpha = 1.0 - beta
            ab = float(sched.alpha_bar[t - 1])
            eps_hat = prior(z[None], cond, torch.tensor([t]))[0]
            mean = (z - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
            if t > 1:
                ab_prev = float(sched.alpha_bar[t - 2])
                sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
                z = mean + sigma * torch.randn(prior.embed_dim, generator=g)
            else:
                z = mean
    return F.normalize(z, dim=-1)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_diffusion(path: str, model, extra_meta: dict = None) -> None:
    if isinstance(model, EmbeddingPrior):
        meta = {
            "kind": "embedding_prior",
            "embed_dim": model.embed_dim,
            "hidden": model.hidden,
        }
    else:
        meta = {
            "kind": "image_model",
            "resolution": model.resolution,
            "cond_dim": model.cond_dim,
            "channels": model.channels,
        }
    meta["schedule"] = model.schedule.to_json()
    meta["is_trained"] = bool(model.is_trained)
    meta.update(extra_meta or {})
    save_module(path, model, meta)


def load_diffusion(path: str):
    state, meta = load_module_state(path)
    schedule = DiffusionSchedule.from_json(meta["schedule"])
    if meta.get("kind") == "embedding_prior":
        model = EmbeddingPrior(
            embed_dim=meta["embed_dim"], hidden=meta["hidden"], schedule=schedule
        )
    elif meta.get("kind") == "image_model":
        model = ImageDenoiser(
            resolution=meta["resolution"], cond_dim=meta["cond_dim"],
            channels=meta["channels"], schedule=schedule,
        )
    else:
        raise ContractError(f"{path} is not a diffusion checkpoint")
    model.load_state_dict(state)
    model.is_trained = meta["is_trained"]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, meta
