"""Differentiable camera + ray-marching renderer.

Volume rendering with occupancy-as-opacity: per ray, stratified samples are
alpha-composited front to back, remaining transmittance goes to the
background color. A hard compositing mode pastes the exact background color
on rays that never cross the occupancy threshold, for background-loss
exactness checks; soft compositing is the training path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ContractError
from .scenes import SCENE_BOUND_RADIUS

# field callable: (points (N, 3)) -> (occupancy (N,), rgb (N, 3))
FieldFn = Callable[[torch.Tensor], tuple]

DEFAULT_FG_THRESHOLD = 0.5
DEFAULT_FOV_DEG = 60.0
# Per-unit-length opacity gain: a sample of occupancy o over a segment of
# length dt contributes alpha = 1 - (1 - o)^(gain * dt). Binary occupancies
# stay exactly 0/1 for any gain; soft fields must be confident to become
# opaque, which keeps the hard 0.5 threshold machinery meaningful.
DENSITY_GAIN = 4.0


@dataclass
class CameraPose:
    center: torch.Tensor        # (3,) world
    orientation: torch.Tensor   # (3, 3) world-to-camera; rows = camera axes
    focal: float                # pixels
    resolution: tuple           # (H, W)
    principal: tuple = None     # (cx, cy); defaults to image center

    def __post_init__(self):
        self.center = torch.as_tensor(self.center, dtype=torch.float64)
        self.orientation = torch.as_tensor(self.orientation, dtype=torch.float64)
        if self.principal is None:
            h, w = self.resolution
            self.principal = (w / 2.0, h / 2.0)
        r = self.orientation
        if not torch.allclose(r @ r.T, torch.eye(3, dtype=r.dtype), atol=1e-5):
            raise ContractError("orientation is not orthonormal")
        if torch.det(r) < 0:
            raise ContractError("orientation must have determinant +1")
        if float(self.center.abs().max()) <= 0.5:
            raise ContractError("camera center must lie outside the unit cube")

    def to_json(self) -> dict:
        t = (-self.orientation @ self.center).tolist()
        extr = [list(row) + [t[i]] for i, row in enumerate(self.orientation.tolist())]
        return {
            "extrinsics": extr,  # 3x4 row-major, X_cam = R X_world + t
            "focal": self.focal,
            "principal_point": list(self.principal),
            "resolution": list(self.resolution),
        }

    @staticmethod
    def from_json(d: dict) -> "CameraPose":
        extr = torch.tensor(d["extrinsics"], dtype=torch.float64)
        r, t = extr[:, :3], extr[:, 3]
        center = -r.T @ t
        return CameraPose(
            center=center,
            orientation=r,
            focal=float(d["focal"]),
            resolution=tuple(d["resolution"]),
            principal=tuple(d["principal_point"]),
        )

    def rotated_about_z(self, angle: float) -> "CameraPose":
        """Pose viewing the world rotated by `angle` about the vertical axis
        (used for input-frame reconstruction)."""
        c, s = math.cos(angle), math.sin(angle)
        rz = torch.tensor(
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64
        )
        # X_cam = R X_world + t; with X_world = Rz(-angle) X_new we get
        # R' = R Rz(-angle) acting on the new frame, center' = Rz(angle)^T? --
        # equivalently rotate the camera center the opposite way.
        return CameraPose(
            center=rz.T @ self.center,
            orientation=self.orientation @ rz,
            focal=self.focal,
            resolution=self.resolution,
            principal=self.principal,
        )

    @property
    def azimuth(self) -> float:
        return math.atan2(float(self.center[1]), float(self.center[0]))

    def same_geometry(self, other: "CameraPose") -> bool:
        return (
            self.resolution == tuple(other.resolution)
            and abs(self.focal - other.focal) < 1e-9
            and torch.allclose(self.center, other.center, atol=1e-9)
            and torch.allclose(self.orientation, other.orientation, atol=1e-9)
        )


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    near: float
    far: float

    def __post_init__(self):
        self.origin = torch.as_tensor(self.origin, dtype=torch.float64)
        self.direction = torch.as_tensor(self.direction, dtype=torch.float64)
        if abs(float(self.direction.norm()) - 1.0) > 1e-6:
            raise ContractError("ray direction must be unit length")
        if not (0 < self.near < self.far):
            raise ContractError("require 0 < near < far")


@dataclass
class RenderedView:
    rgb: torch.Tensor              # (H, W, 3) in [0, 1]
    fg_mask: torch.Tensor          # (H, W) bool
    alpha: torch.Tensor            # (H, W) accumulated opacity in [0, 1]
    pose: CameraPose
    background_color: torch.Tensor  # (3,)


def sample_camera(
    seed: int,
    elevation_range: tuple = (math.radians(10.0), math.radians(50.0)),
    radius: float = 2.0,
    resolution: tuple = (64, 64),
    fov_degrees: float = DEFAULT_FOV_DEG,
) -> CameraPose:
    """Random look-at-origin camera on a sphere of the given radius.

    Azimuth uniform in [0, 2pi), elevation uniform in elevation_range
    (radians, above the xy-plane), z-up.
    """
    if radius <= 0.87:
        raise ContractError("camera radius must exceed the unit-cube circumsphere")
    rng = np.random.default_rng(int(seed))
    azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    lo, hi = elevation_range
    elevation = float(rng.uniform(lo, hi))
    return look_at_camera(azimuth, elevation, radius, resolution, fov_degrees)


def look_at_camera(
    azimuth: float,
    elevation: float,
    radius: float,
    resolution: tuple = (64, 64),
    fov_degrees: float = DEFAULT_FOV_DEG,
) -> CameraPose:
    center = torch.tensor(
        [
            radius * math.cos(elevation) * math.cos(azimuth),
            radius * math.cos(elevation) * math.sin(azimuth),
            radius * math.sin(elevation),
        ],
        dtype=torch.float64,
    )
    z_cam = -center / center.norm()  # optical axis through the origin
    up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    x_cam = torch.linalg.cross(z_cam, up)
    x_cam = x_cam / x_cam.norm()
    y_cam = torch.linalg.cross(z_cam, x_cam)
    orientation = torch.stack([x_cam, y_cam, z_cam])
    h, w = resolution
    focal = (w / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
    return CameraPose(
        center=center, orientation=orientation, focal=focal, resolution=(h, w)
    )


def pixel_rays(pose: CameraPose, pixel_idx: Optional[torch.Tensor] = None):
    """Ray origins/directions for pixel centers; pixel_idx selects a flat
    subset (row-major) when given. Returns (origin (3,), dirs (N, 3))."""
    h, w = pose.resolution
    cx, cy = pose.principal
    if pixel_idx is None:
        vs, us = torch.meshgrid(
            torch.arange(h, dtype=torch.float64),
            torch.arange(w, dtype=torch.float64),
            indexing="ij",
        )
        us, vs = us.reshape(-1), vs.reshape(-1)
    else:
        pixel_idx = torch.as_tensor(pixel_idx, dtype=torch.long)
        vs = (pixel_idx // w).to(torch.float64)
        us = (pixel_idx % w).to(torch.float64)
    d_cam = torch.stack(
        [
            (us + 0.5 - cx) / pose.focal,
            (vs + 0.5 - cy) / pose.focal,
            torch.ones_like(us),
        ],
        dim=-1,
    )
    d_world = d_cam @ pose.orientation  # == orientation^T applied per ray
    d_world = d_world / d_world.norm(dim=-1, keepdim=True)
    return pose.center, d_world


def _sphere_clip(origin: torch.Tensor, dirs: torch.Tensor, radius: float):
    """Per-ray [near, far] against the scene bounding sphere; hit mask."""
    oc = origin.view(1, 3)
    b = (dirs * oc).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = torch.sqrt(disc.clamp(min=0.0))
    near = (-b - sq).clamp(min=1e-3)
    far = -b + sq
    hit = hit & (far > near)
    return hit, near, far


@dataclass
class CullGrid:
    """Coarse keep/skip grid over [-extent, extent]^3 for empty-space
    skipping. Skipped samples contribute exactly zero opacity."""

    keep: torch.Tensor  # (G, G, G) bool
    extent: float

    def lookup(self, points: torch.Tensor) -> torch.Tensor:
        g = self.keep.shape[0]
        idx = ((points + self.extent) * (g / (2 * self.extent))).long()
        idx = idx.clamp(min=0, max=g - 1)
        return self.keep[idx[..., 0], idx[..., 1], idx[..., 2]]


def build_cull_grid(
    field_fn: FieldFn,
    resolution: int = 20,
    threshold: float = 0.02,
    extent: float = 0.9,
    dilate: int = 1,
) -> CullGrid:
    axis = (torch.arange(resolution, dtype=torch.float32) + 0.5) / resolution
    axis = axis * 2 * extent - extent
    gx, gy, gz = torch.meshgrid(axis, axis, axis, indexing="ij")
    pts = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
    with torch.no_grad():
        occ, _ = field_fn(pts)
    occ = occ.reshape(resolution, resolution, resolution)
    keep = occ > threshold
    if dilate > 0:
        k = keep.float()[None, None]
        pool = torch.nn.functional.max_pool3d(
            k, kernel_size=2 * dilate + 1, stride=1, padding=dilate
        )
        keep = pool[0, 0] > 0
    return CullGrid(keep=keep, extent=extent)


def occupancy_to_alpha(occ, dt, gain=DENSITY_GAIN):
    """Per-segment opacity from occupancy over segment length dt.

    Exactly 0 / 1 for binary occupancies; in between, opacity compounds per
    unit length (alpha = 1 - (1 - o)^(gain * dt)).
    """
    alpha = 1.0 - (1.0 - occ).clamp(min=1e-12) ** (gain * dt)
    return torch.where(occ >= 1.0 - 1e-7, torch.ones_like(occ), alpha)


def _composite(occ, rgb, dt, background, dtype, gain=DENSITY_GAIN):
    """Front-to-back alpha compositing along dim -1 of occ (..., S); dt is
    the per-ray segment length, broadcastable against occ."""
    alpha = occupancy_to_alpha(occ, dt, gain)
    trans = torch.cumprod(1.0 - alpha + 1e-10, dim=-1)
    trans = torch.cat(
        [torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1
    )
    weights = trans * alpha
    acc = weights.sum(-1)
    color = (weights[..., None] * rgb).sum(-2)
    color = color + (1.0 - acc)[..., None] * background.to(dtype)
    return color, acc


def render_rays(
    field_fn: FieldFn,
    pose: CameraPose,
    pixel_idx: Optional[torch.Tensor],
    background: torch.Tensor,
    samples_per_ray: int,
    jitter: Optional[torch.Generator] = None,
    cull: Optional[CullGrid] = None,
    dtype=torch.float32,
):
    """Render a flat subset of pixels (all pixels when pixel_idx is None).

    Returns (rgb (N, 3), acc (N,)). Differentiable through field_fn.
    """
    if samples_per_ray < 16:
        raise ContractError("samples_per_ray must be >= 16")
    origin, dirs = pixel_rays(pose, pixel_idx)
    origin = origin.to(dtype)
    dirs = dirs.to(dtype)
    n_rays = dirs.shape[0]
    background = torch.as_tensor(background, dtype=dtype)

    hit, near, far = _sphere_clip(origin, dirs, SCENE_BOUND_RADIUS)
    rgb_out = background.expand(n_rays, 3).clone()
    acc_out = torch.zeros(n_rays, dtype=dtype)
    if not bool(hit.any()):
        return rgb_out, acc_out

    h_idx = hit.nonzero(as_tuple=True)[0]
    near_h, far_h = near[h_idx], far[h_idx]
    s = samples_per_ray
    if jitter is None:
        offsets = torch.full((len(h_idx), s), 0.5, dtype=dtype)
    else:
        offsets = torch.rand(len(h_idx), s, generator=jitter, dtype=dtype)
    t_vals = near_h[:, None] + (
        (torch.arange(s, dtype=dtype)[None, :] + offsets) / s
    ) * (far_h - near_h)[:, None]
    pts = origin.view(1, 1, 3) + t_vals[..., None] * dirs[h_idx][:, None, :]
    flat = pts.reshape(-1, 3)

    if cull is not None:
        keep = cull.lookup(flat)
        occ = torch.zeros(flat.shape[0], dtype=dtype)
        rgb = torch.zeros(flat.shape[0], 3, dtype=dtype)
        if bool(keep.any()):
            occ_k, rgb_k = field_fn(flat[keep])
            occ = occ.index_put((keep.nonzero(as_tuple=True)[0],), occ_k.to(dtype))
            rgb = rgb.index_put((keep.nonzero(as_tuple=True)[0],), rgb_k.to(dtype))
    else:
        occ, rgb = field_fn(flat)

    occ = occ.reshape(len(h_idx), s).to(dtype)
    rgb = rgb.reshape(len(h_idx), s, 3).to(dtype)
    dt = ((far_h - near_h) / s)[:, None]
    color, acc = _composite(occ, rgb, dt, background, dtype)
    rgb_out = rgb_out.index_put((h_idx,), color)
    acc_out = acc_out.index_put((h_idx,), acc)
    return rgb_out, acc_out


def render_field(
    field_fn: FieldFn,
    pose: CameraPose,
    background: torch.Tensor,
    samples_per_ray: int = 64,
    jitter: Optional[torch.Generator] = None,
    hard_background: bool = False,
    hard_threshold: float = DEFAULT_FG_THRESHOLD,
    fg_threshold: float = DEFAULT_FG_THRESHOLD,
    cull: Optional[CullGrid] = None,
    dtype=torch.float32,
) -> RenderedView:
    """Render a full view of a field.

    Soft mode (default): fg_mask = accumulated opacity > fg_threshold and rgb
    is the composited value everywhere. Hard mode: rays whose samples never
    exceed hard_threshold get the exact background color pasted, and fg_mask
    is the complement of that hard background test.
    """
    h, w = pose.resolution
    background = torch.as_tensor(background, dtype=dtype)
    rgb, acc = render_rays(
        field_fn, pose, None, background, samples_per_ray,
        jitter=jitter, cull=cull, dtype=dtype,
    )
    rgb = rgb.reshape(h, w, 3)
    acc = acc.reshape(h, w)
    if hard_background:
        bg = background_mask_field(
            field_fn, pose, t_threshold=hard_threshold,
            samples_per_ray=samples_per_ray, dtype=dtype,
        )
        fg = ~bg
        rgb = torch.where(fg[..., None], rgb, background.expand(h, w, 3))
    else:
        fg = acc > fg_threshold
    return RenderedView(
        rgb=rgb, fg_mask=fg, alpha=acc, pose=pose, background_color=background
    )


def background_mask_field(
    field_fn: FieldFn,
    pose: CameraPose,
    t_threshold: float = DEFAULT_FG_THRESHOLD,
    samples_per_ray: int = 64,
    dtype=torch.float32,
) -> torch.Tensor:
    """True exactly where no midpoint ray sample has occupancy > t_threshold
    (the hard indicator of the background loss). Never differentiable."""
    h, w = pose.resolution
    origin, dirs = pixel_rays(pose, None)
    origin, dirs = origin.to(dtype), dirs.to(dtype)
    hit, near, far = _sphere_clip(origin, dirs, SCENE_BOUND_RADIUS)
    bg = torch.ones(h * w, dtype=torch.bool)
    if not bool(hit.any()):
        return bg.reshape(h, w)
    h_idx = hit.nonzero(as_tuple=True)[0]
    s = samples_per_ray
    t_vals = near[h_idx][:, None] + (
        (torch.arange(s, dtype=dtype)[None, :] + 0.5) / s
    ) * (far[h_idx] - near[h_idx])[:, None]
    pts = origin.view(1, 1, 3) + t_vals[..., None] * dirs[h_idx][:, None, :]
    with torch.no_grad():
        occ, _ = field_fn(pts.reshape(-1, 3))
    any_fg = (occ.reshape(len(h_idx), s) > t_threshold).any(dim=-1)
    bg = bg.index_put((h_idx,), ~any_fg)
    return bg.reshape(h, w)


@dataclass
class RayHit:
    point: torch.Tensor
    depth: float


def march_ray_field(
    field_fn: FieldFn,
    ray: Ray,
    t_threshold: float,
    samples_per_ray: int = 128,
    dtype=torch.float32,
) -> Optional[RayHit]:
    """First midpoint sample with occupancy > t_threshold, refined by one
    bisection step; None if the ray never crosses the threshold."""
    if not (0.0 < t_threshold < 1.0):
        raise ContractError("t_threshold must be in (0, 1)")
    origin = ray.origin.to(dtype)
    direction = ray.direction.to(dtype)
    s = samples_per_ray
    t_vals = ray.near + ((torch.arange(s, dtype=dtype) + 0.5) / s) * (
        ray.far - ray.near
    )
    pts = origin[None, :] + t_vals[:, None] * direction[None, :]
    with torch.no_grad():
        occ, _ = field_fn(pts)
    above = occ > t_threshold
    if not bool(above.any()):
        return None
    i = int(above.to(torch.int64).argmax())
    t_hit = float(t_vals[i])
    t_prev = float(t_vals[i - 1]) if i > 0 else float(ray.near)
    mid = 0.5 * (t_prev + t_hit)
    with torch.no_grad():
        occ_mid, _ = field_fn((origin + mid * direction)[None, :])
    if float(occ_mid[0]) > t_threshold:
        lo, hi = t_prev, mid
    else:
        lo, hi = mid, t_hit
    depth = 0.5 * (lo + hi)
    return RayHit(point=origin + depth * direction, depth=depth)


# ---------------------------------------------------------------------------
# Decoder-facing wrappers (spec operation signatures)
# ---------------------------------------------------------------------------

def render_view(params, latent, pose, background, samples_per_ray=64, **kw):
    from .field import field_closure

    return render_field(
        field_closure(params, latent), pose, background, samples_per_ray, **kw
    )


def background_mask(params, latent, pose, t_threshold=DEFAULT_FG_THRESHOLD, **kw):
    from .field import field_closure

    return background_mask_field(field_closure(params, latent), pose, t_threshold, **kw)


def march_ray(params, latent, ray, t_threshold, **kw):
    from .field import field_closure

    return march_ray_field(field_closure(params, latent), ray, t_threshold, **kw)


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------

def to_uint8(rgb: torch.Tensor) -> np.ndarray:
    arr = rgb.detach().cpu().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str, rgb: torch.Tensor) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(rgb)).save(path, format="PNG")


def write_float_npz(path: str, **arrays) -> None:
    np.savez(path, **{k: np.asarray(v.detach().cpu()) for k, v in arrays.items()})


def turntable_strip(
    field_fn: FieldFn,
    n_frames: int = 6,
    elevation: float = math.radians(25.0),
    radius: float = 2.0,
    resolution: int = 64,
    samples_per_ray: int = 48,
) -> torch.Tensor:
    """Horizontal strip of azimuth-swept renders (H, n*W, 3)."""
    frames = []
    background = torch.ones(3)
    for i in range(n_frames):
        pose = look_at_camera(
            2 * math.pi * i / n_frames, elevation, radius,
            resolution=(resolution, resolution),
        )
        view = render_field(field_fn, pose, background, samples_per_ray)
        frames.append(view.rgb)
    return torch.cat(frames, dim=1)
