"""Single-view reconstruction: image encoder into the shape latent space,
trained jointly with the implicit decoder under a multi-view loss.

Reconstruction frame: shapes are predicted in the input view's frame (the
world rotated so the encoded camera sits at azimuth zero). A single image
cannot determine the object's world azimuth, so supervision cameras and
ground-truth grids are rotated accordingly; this keeps the task well-posed
for rotationally asymmetric categories.

The loss replaces the cited surface-rendering losses with an L1 photometric
term plus a mask BCE term (weights 1.0 / 0.5), since this renderer is
volumetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, save_module
from .embedder import _ConvTower, embed_image
from .errors import ContractError, TrainingDivergence
from .field import (
    FieldConfig,
    ImplicitDecoder,
    OccupancyGrid,
    decode,
    field_closure,
    snapshot_field,
)
from .render import RenderedView, pixel_rays, _composite, _sphere_clip
from .scenes import load_cameras, load_view, occupancy
from .seeding import derive_seed, generator


@dataclass(frozen=True)
class SvrConfig:
    epochs: int = 60
    lr: float = 2e-3
    batch_scenes: int = 8
    rays_per_view: int = 128
    supervision_views: int = 2
    samples_per_ray: int = 24
    mask_weight: float = 0.5
    hull_weight: float = 0.5
    hull_points: int = 256
    min_val_miou: float = 0.6  # None disables the quality gate
    miou_resolution: int = 32
    channels: int = 16


class SvrEncoder(nn.Module):
    def __init__(self, latent_dim: int, channels: int = 16, resolution: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        # flatten pooling: the latent must carry precise size/pose layout
        self.tower = _ConvTower(
            latent_dim, channels=channels, resolution=resolution, pool="flatten"
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.tower(images)


def encode_image(params: SvrEncoder, image: torch.Tensor) -> torch.Tensor:
    """Shape latent of an (H, W, 3) image (or batch) in [0, 1]."""
    single = image.dim() == 3
    batch = image[None] if single else image
    with torch.no_grad():
        lo, hi = float(batch.min()), float(batch.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ContractError("image values must lie in [0, 1]")
    out = params(batch)
    return out[0] if single else out


def svr_loss(rendered: RenderedView, target: RenderedView) -> torch.Tensor:
    """L1 photometric on rgb + 0.5 * BCE between rendered opacity and the
    target foreground mask. Zero iff images and masks match exactly."""
    if not rendered.pose.same_geometry(target.pose):
        raise ContractError("rendered/target poses do not match")
    photometric = (rendered.rgb - target.rgb).abs().mean()
    mask = F.binary_cross_entropy(
        rendered.alpha.clamp(0.0, 1.0), target.fg_mask.to(rendered.alpha.dtype)
    )
    return photometric + 0.5 * mask


# ---------------------------------------------------------------------------
# Batched ray supervision
# ---------------------------------------------------------------------------

def _ray_points(pose, pixel_idx, samples, jitter, dtype=torch.float32):
    """Sample points along the rays of selected pixels. Returns
    (pts (R*S, 3), dt (R,)); pixels must be sphere-hitting."""
    origin, dirs = pixel_rays(pose, pixel_idx)
    origin, dirs = origin.to(dtype), dirs.to(dtype)
    hit, near, far = _sphere_clip(origin, dirs, 0.88)
    if not bool(hit.all()):
        raise ContractError("ray batch contains non-intersecting rays")
    r = dirs.shape[0]
    if jitter is None:
        offsets = torch.full((r, samples), 0.5, dtype=dtype)
    else:
        offsets = torch.rand(r, samples, generator=jitter, dtype=dtype)
    t_vals = near[:, None] + (
        (torch.arange(samples, dtype=dtype)[None, :] + offsets) / samples
    ) * (far - near)[:, None]
    pts = origin.view(1, 1, 3) + t_vals[..., None] * dirs[:, None, :]
    return pts.reshape(-1, 3), (far - near) / samples


def hit_pixels(pose) -> torch.Tensor:
    """Flat indices of pixels whose rays intersect the scene bounding sphere
    (pixels outside render to the exact background in both GT and model)."""
    origin, dirs = pixel_rays(pose, None)
    hit, _, _ = _sphere_clip(origin.float(), dirs.float(), 0.88)
    return hit.nonzero(as_tuple=True)[0]


def hull_labels(poses, masks, points: torch.Tensor) -> torch.Tensor:
    """Visual-hull labels for world points: 1 where every view's silhouette
    contains the point's projection (projections outside the frame do not
    carve). The hull contains the true solid, so 0-labels are exact."""
    label = torch.ones(points.shape[0], dtype=torch.bool)
    for pose, mask in zip(poses, masks):
        h, w = pose.resolution
        r = pose.orientation.to(points.dtype)
        o = pose.center.to(points.dtype)
        x_cam = (points - o) @ r.T
        z = x_cam[:, 2].clamp(min=1e-6)
        u = (pose.focal * x_cam[:, 0] / z + pose.principal[0]).long()
        v = (pose.focal * x_cam[:, 1] / z + pose.principal[1]).long()
        in_frame = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = (v.clamp(0, h - 1) * w + u.clamp(0, w - 1))
        inside = mask.reshape(-1)[idx] | ~in_frame
        label &= inside
    return label


class _SceneCache:
    """Preloaded images (uint8), cameras, and per-view pixel index sets:
    all sphere-hitting pixels, split into ground-truth silhouette (fg) and
    off-silhouette (bg) for stratified ray supervision."""

    def __init__(self, manifest, split):
        self.entries = manifest.by_split(split)
        self.images = []   # per scene: (V, H, W, 3) uint8
        self.cameras = []  # per scene: list of CameraPose
        self.masks = []    # per scene: (V, H*W) bool silhouettes
        self.fg = []       # per scene: list of LongTensor (object pixels)
        self.bg = []       # per scene: list of LongTensor (empty hit pixels)
        for e in self.entries:
            views = [load_view(manifest, e, k) for k in range(len(e.view_paths))]
            self.images.append(
                torch.stack([(v * 255).round().to(torch.uint8) for v in views])
            )
            cams = load_cameras(manifest, e)
            self.cameras.append(cams)
            fg_v, bg_v, mask_v = [], [], []
            for k, cam in enumerate(cams):
                hit = hit_pixels(cam)
                mask = (views[k].reshape(-1, 3) < 1.0).any(dim=-1)
                mask_v.append(mask)
                on = mask[hit]
                fg_v.append(hit[on])
                bg_v.append(hit[~on])
            self.masks.append(torch.stack(mask_v))
            self.fg.append(fg_v)
            self.bg.append(bg_v)

    def __len__(self):
        return len(self.entries)


def _train_reconstruction(
    manifest,
    field_cfg: FieldConfig,
    cfg: SvrConfig,
    seed: int,
    encode_fn,
    trainable,
    label: str,
):
    """Shared loop for the SVR model and the frozen-image-encoder baseline.

    encode_fn(images (B, H, W, 3)) -> latents (B, d); `trainable` lists the
    modules to optimize (decoder always included by the callers).
    """
    cache = _SceneCache(manifest, "train")
    if len(cache) == 0:
        raise ContractError("train split is empty")
    n_views = cache.images[0].shape[0]
    sup_n = min(cfg.supervision_views, n_views - 1)

    params = [p for m in trainable for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(cfg.epochs, 1), eta_min=cfg.lr * 0.05
    )
    rng = np.random.default_rng(derive_seed(seed, label, "batches"))
    jitter = generator(derive_seed(seed, label, "jitter"))
    s = cfg.samples_per_ray
    history = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(cache))
        epoch_losses = []
        for start in range(0, len(cache), cfg.batch_scenes):
            batch = order[start : start + cfg.batch_scenes]
            in_imgs, all_pts, gt_rgb, gt_mask, all_dt = [], [], [], [], []
            all_hull = []
            for b in batch:
                cams = cache.cameras[b]
                k_in = int(rng.integers(0, n_views))
                others = [v for v in range(n_views) if v != k_in]
                sup = rng.choice(others, size=sup_n, replace=False)
                az = cams[k_in].azimuth
                in_imgs.append(cache.images[b][k_in].float() / 255.0)
                pts_scene = []
                for v in sup:
                    pose = cams[v].rotated_about_z(az)
                    # stratified rays: half on the GT silhouette, half off,
                    # so the opacity gradients stay balanced
                    n_fg = cfg.rays_per_view // 2
                    fg, bg = cache.fg[b][v], cache.bg[b][v]
                    sel_fg = fg[torch.from_numpy(
                        rng.choice(len(fg), size=min(n_fg, len(fg)),
                                   replace=len(fg) < n_fg)
                    )] if len(fg) else fg
                    n_bg = cfg.rays_per_view - len(sel_fg)
                    sel_bg = bg[torch.from_numpy(
                        rng.choice(len(bg), size=n_bg, replace=len(bg) < n_bg)
                    )]
                    sel = torch.cat([sel_fg, sel_bg])
                    pts, dt = _ray_points(pose, sel, s, jitter)
                    pts_scene.append(pts)
                    all_dt.append(dt)
                    img = cache.images[b][v].float() / 255.0
                    flat = img.reshape(-1, 3)[sel]
                    gt_rgb.append(flat)
                    gt_mask.append((flat < 1.0).any(dim=-1).float())
                uniform = torch.from_numpy(
                    rng.uniform(-0.5, 0.5, size=(cfg.hull_points, 3))
                ).float()
                scene_pts = torch.cat(pts_scene + [uniform])
                # rendering cannot distinguish hollow from solid, so interiors
                # are supervised with visual-hull labels from all silhouettes
                rot_poses = [c.rotated_about_z(az) for c in cams]
                all_hull.append(
                    hull_labels(rot_poses, cache.masks[b], scene_pts).float()
                )
                all_pts.append(scene_pts)
            latents = encode_fn(torch.stack(in_imgs))
            pts = torch.stack(all_pts)  # (B, sup_n*R*S + hull, 3)
            occ, rgb = decode_trainable(latents, pts, trainable)
            b_n = len(batch)
            n_ray = sup_n * cfg.rays_per_view * s
            occ_rays = occ[:, :n_ray].reshape(b_n * sup_n, cfg.rays_per_view, s)
            rgb_rays = rgb[:, :n_ray].reshape(b_n * sup_n, cfg.rays_per_view, s, 3)
            dt = torch.stack(all_dt)[..., None]  # (B*sup, R, 1)
            color, acc = _composite(occ_rays, rgb_rays, dt, torch.ones(3), occ.dtype)
            gt_rgb_t = torch.stack(gt_rgb)
            gt_mask_t = torch.stack(gt_mask)
            photometric = (color - gt_rgb_t).abs().mean()
            bce = F.binary_cross_entropy(acc.clamp(0.0, 1.0), gt_mask_t)
            hull_bce = F.binary_cross_entropy(
                occ.clamp(1e-6, 1 - 1e-6).reshape(b_n, -1),
                torch.stack(all_hull),
            )
            loss = photometric + cfg.mask_weight * bce + cfg.hull_weight * hull_bce
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    f"{label} loss not finite", {"epoch": epoch}
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        scheduler.step()
        history.append(float(np.mean(epoch_losses)))
    return history


def decode_trainable(latents, pts, trainable):
    decoder = next(m for m in trainable if isinstance(m, ImplicitDecoder))
    return decode(decoder, latents, pts)


def gt_grid(spec, azimuth: float, resolution: int) -> OccupancyGrid:
    """Analytic occupancy on the unit-cube lattice, expressed in the input
    view's frame (world rotated so that camera azimuth becomes zero)."""
    import math

    pts = OccupancyGrid.lattice(resolution)
    c, s = math.cos(azimuth), math.sin(azimuth)
    world = torch.stack(
        [
            c * pts[:, 0] - s * pts[:, 1],
            s * pts[:, 0] + c * pts[:, 1],
            pts[:, 2],
        ],
        dim=-1,
    )
    vals = occupancy(spec, world).reshape(resolution, resolution, resolution)
    return OccupancyGrid(resolution=resolution, values=vals.float())


def reconstruction_miou(
    manifest, encode_fn, decoder, split: str, resolution: int, threshold: float = 0.5
):
    """Mean foreground mIoU of single-view reconstructions against the
    analytic occupancy oracle (input view 0 of each scene)."""
    from .evaluate import compute_miou

    ious = []
    for e in manifest.by_split(split):
        img = load_view(manifest, e, 0)
        cams = load_cameras(manifest, e)
        with torch.no_grad():
            latent = encode_fn(img[None])[0]
        grid = snapshot_field(field_closure(decoder, latent), resolution)
        ref = gt_grid(e.spec, cams[0].azimuth, resolution)
        ious.append(compute_miou(grid, ref, threshold))
    return float(np.mean(ious)), ious


def train_svr(manifest, field_cfg: FieldConfig, cfg: SvrConfig, seed: int):
    """Train encoder + decoder; returns (encoder, decoder, metrics)."""
    res = manifest.resolution
    torch.manual_seed(derive_seed(seed, "svr-init"))
    encoder = SvrEncoder(field_cfg.latent_dim, channels=cfg.channels, resolution=res)
    decoder = ImplicitDecoder(field_cfg)

    history = _train_reconstruction(
        manifest, field_cfg, cfg, seed,
        encode_fn=lambda imgs: encode_image(encoder, imgs),
        trainable=[encoder, decoder],
        label="svr",
    )
    miou, per_scene = reconstruction_miou(
        manifest,
        lambda imgs: encode_image(encoder, imgs),
        decoder,
        "val",
        cfg.miou_resolution,
    )
    if cfg.min_val_miou is not None and miou < cfg.min_val_miou:
        raise TrainingDivergence(
            f"val mIoU {miou:.3f} below gate {cfg.min_val_miou}",
            {"val_miou": miou},
        )
    metrics = {"val_miou": miou, "loss_history": history}
    return encoder, decoder, metrics


def train_clip_baseline(manifest, embedder, field_cfg: FieldConfig, cfg: SvrConfig, seed: int):
    """Frozen joint-embedder image tower as the encoder; only the decoder is
    optimized. The decoder's latent dim must equal the embedding dim."""
    torch.manual_seed(derive_seed(seed, "baseline-init"))
    baseline_cfg = FieldConfig(
        latent_dim=embedder.cfg.embed_dim,
        width=field_cfg.width,
        hidden_layers=field_cfg.hidden_layers,
        posenc_bands=field_cfg.posenc_bands,
    )
    decoder = ImplicitDecoder(baseline_cfg)

    def encode_fn(imgs):
        with torch.no_grad():
            return embed_image(embedder, imgs)

    history = _train_reconstruction(
        manifest, baseline_cfg, cfg, seed,
        encode_fn=encode_fn, trainable=[decoder], label="clip-baseline",
    )
    miou, _ = reconstruction_miou(
        manifest, encode_fn, decoder, "val", cfg.miou_resolution
    )
    metrics = {"val_miou": miou, "loss_history": history}
    return decoder, metrics


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_encoder(path: str, encoder: SvrEncoder, extra_meta: dict = None) -> None:
    meta = {
        "kind": "svr_encoder",
        "latent_dim": encoder.latent_dim,
        "channels": encoder.tower.net[0].out_channels,
        "resolution": encoder.tower.resolution,
    }
    meta.update(extra_meta or {})
    save_module(path, encoder, meta)


def load_encoder(path: str):
    state, meta = load_module_state(path)
    if meta.get("kind") != "svr_encoder":
        raise ContractError(f"{path} is not an SVR encoder checkpoint")
    enc = SvrEncoder(
        meta["latent_dim"], channels=meta["channels"], resolution=meta["resolution"]
    )
    enc.load_state_dict(state)
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc, meta
