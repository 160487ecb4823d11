"""Conditional implicit field: occupancy + color decoder over query points.

The decoder is a point-conditioned MLP with positional encoding, modulated
per layer by the shape latent (feature-wise scale/shift computed once per
latent, so per-point cost stays low). Outputs are squashed by a logistic per
channel, which gives the [0, 1] range invariant without clipping.

Topologies: "shared" (one trunk, two heads) and "split" (independent copies
of the trunk for occupancy and color, same heads), used by texture
stylization to freeze geometry exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field

import torch
import torch.nn as nn

from .errors import ContractError


@dataclass(frozen=True)
class FieldConfig:
    latent_dim: int = 128
    width: int = 256
    hidden_layers: int = 5
    posenc_bands: int = 6

    @property
    def posenc_dim(self) -> int:
        return 3 + 6 * self.posenc_bands


def positional_encoding(points: torch.Tensor, bands: int) -> torch.Tensor:
    """[p, sin(2^k pi p), cos(2^k pi p)] for k = 0..bands-1."""
    out = [points]
    for k in range(bands):
        freq = (2.0 ** k) * math.pi
        out.append(torch.sin(freq * points))
        out.append(torch.cos(freq * points))
    return torch.cat(out, dim=-1)


class _Trunk(nn.Module):
    """Point pathway conditioned on the latent twice: concatenated into the
    first layer's input and as per-layer feature-wise scale/shift (the
    modulation weights are computed once per latent, not per point)."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        dims = [cfg.posenc_dim + cfg.latent_dim] + [cfg.width] * cfg.hidden_layers
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(cfg.hidden_layers)
        )
        self.films = nn.ModuleList(
            nn.Linear(cfg.latent_dim, 2 * cfg.width) for _ in range(cfg.hidden_layers)
        )
        for f in self.films:
            # near-identity modulation at init, small symmetry-breaking slope
            nn.init.normal_(f.weight, std=0.01)
            nn.init.zeros_(f.bias)

    def forward(self, x: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        # x: (B, N, posenc_dim); latent: (B, latent_dim)
        h = torch.cat([x, latent[:, None, :].expand(-1, x.shape[1], -1)], dim=-1)
        for layer, film in zip(self.layers, self.films):
            gamma, beta = film(latent).chunk(2, dim=-1)
            h = layer(h) * (1.0 + gamma[:, None, :]) + beta[:, None, :]
            h = torch.nn.functional.softplus(h)
        return h


class ImplicitDecoder(nn.Module):
    def __init__(self, cfg: FieldConfig = FieldConfig(), topology: str = "shared"):
        super().__init__()
        if topology not in ("shared", "split"):
            raise ContractError(f"unknown topology {topology!r}")
        self.cfg = cfg
        self.topology = topology
        if topology == "shared":
            self.trunk = _Trunk(cfg)
        else:
            self.occ_trunk = _Trunk(cfg)
            self.color_trunk = _Trunk(cfg)
        self.occupancy_head = nn.Linear(cfg.width, 1)
        self.color_head = nn.Linear(cfg.width, 3)
        # Start mostly-empty: a fresh field that is half-opaque everywhere
        # saturates every ray and destabilizes silhouette training.
        nn.init.constant_(self.occupancy_head.bias, -2.0)

    @property
    def dtype(self):
        return self.occupancy_head.weight.dtype

    def occupancy_parameters(self):
        """Parameters that influence occupancy output (split topology)."""
        if self.topology != "split":
            raise ContractError("occupancy_parameters requires split topology")
        return list(self.occ_trunk.parameters()) + list(
            self.occupancy_head.parameters()
        )

    def color_parameters(self):
        if self.topology != "split":
            raise ContractError("color_parameters requires split topology")
        return list(self.color_trunk.parameters()) + list(self.color_head.parameters())


def decode(params: ImplicitDecoder, latent: torch.Tensor, points: torch.Tensor):
    """Evaluate the field.

    latent (d,) with points (N, 3) -> (occ (N,), rgb (N, 3));
    latent (B, d) with points (B, N, 3) -> batched outputs.
    Differentiable w.r.t. params, latent, and points.
    """
    single = latent.dim() == 1
    lat = latent[None] if single else latent
    pts = points[None] if points.dim() == 2 else points
    if lat.shape[-1] != params.cfg.latent_dim:
        raise ContractError(
            f"latent dim {lat.shape[-1]} != decoder latent dim {params.cfg.latent_dim}"
        )
    if pts.dim() != 3 or pts.shape[-1] != 3 or pts.shape[0] != lat.shape[0]:
        raise ContractError("points must be (N, 3) or (B, N, 3) matching latent batch")
    if not bool(torch.isfinite(pts).all()):
        raise ContractError("points must be finite")
    dtype = params.dtype
    lat = lat.to(dtype)
    x = positional_encoding(pts.to(dtype), params.cfg.posenc_bands)
    if params.topology == "shared":
        h = params.trunk(x, lat)
        occ = torch.sigmoid(params.occupancy_head(h))[..., 0]
        rgb = torch.sigmoid(params.color_head(h))
    else:
        h_o = params.occ_trunk(x, lat)
        occ = torch.sigmoid(params.occupancy_head(h_o))[..., 0]
        h_c = params.color_trunk(x, lat)
        rgb = torch.sigmoid(params.color_head(h_c))
    if single:
        return occ[0], rgb[0]
    return occ, rgb


def field_closure(params: ImplicitDecoder, latent: torch.Tensor):
    """Adapter to the renderer's field callable."""

    def field(points: torch.Tensor):
        return decode(params, latent, points)

    return field


def split_decoder(params: ImplicitDecoder) -> ImplicitDecoder:
    """Duplicate the trunk into independent occupancy/color pathways.

    decode() output is bit-equal before and after splitting: the trunks are
    exact weight copies and the heads were already separate modules.
    """
    if params.topology != "shared":
        raise ContractError("decoder is already split")
    out = ImplicitDecoder(params.cfg, topology="split").to(params.dtype)
    out.occ_trunk.load_state_dict(params.trunk.state_dict())
    out.color_trunk.load_state_dict(copy.deepcopy(params.trunk.state_dict()))
    out.occupancy_head.load_state_dict(params.occupancy_head.state_dict())
    out.color_head.load_state_dict(params.color_head.state_dict())
    return out


# ---------------------------------------------------------------------------
# Occupancy grids
# ---------------------------------------------------------------------------

@dataclass
class OccupancyGrid:
    resolution: int
    values: torch.Tensor  # (R, R, R) in [0, 1], lattice over [-0.5, 0.5]^3

    def __post_init__(self):
        if self.values.shape != (self.resolution,) * 3:
            raise ContractError("grid values must be (R, R, R)")

    @staticmethod
    def lattice(resolution: int, dtype=torch.float32) -> torch.Tensor:
        """Cell-center lattice points, shape (R^3, 3), covering [-0.5, 0.5]^3."""
        axis = -0.5 + (torch.arange(resolution, dtype=dtype) + 0.5) / resolution
        gx, gy, gz = torch.meshgrid(axis, axis, axis, indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)

    def trilinear(self, points: torch.Tensor) -> torch.Tensor:
        """Clamp-at-border trilinear interpolation at world points (N, 3)."""
        r = self.resolution
        vals = self.values.to(points.dtype)
        u = (points + 0.5) * r - 0.5
        i0 = torch.floor(u).long()
        frac = u - i0.to(points.dtype)
        i0 = i0.clamp(min=0, max=r - 1)
        i1 = (i0 + 1).clamp(max=r - 1)
        out = torch.zeros(points.shape[0], dtype=points.dtype)
        for dx, wx in ((0, 1 - frac[:, 0]), (1, frac[:, 0])):
            ix = i0[:, 0] if dx == 0 else i1[:, 0]
            for dy, wy in ((0, 1 - frac[:, 1]), (1, frac[:, 1])):
                iy = i0[:, 1] if dy == 0 else i1[:, 1]
                for dz, wz in ((0, 1 - frac[:, 2]), (1, frac[:, 2])):
                    iz = i0[:, 2] if dz == 0 else i1[:, 2]
                    out = out + wx * wy * wz * vals[ix, iy, iz]
        return out


def snapshot_field(field_fn, resolution: int, chunk: int = 65536) -> OccupancyGrid:
    """Occupancy snapshot of any field callable on the unit-cube lattice."""
    if resolution < 8:
        raise ContractError("snapshot resolution must be >= 8")
    pts = OccupancyGrid.lattice(resolution)
    out = []
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            occ, _ = field_fn(pts[i : i + chunk])
            out.append(occ.detach().float())
    values = torch.cat(out).reshape(resolution, resolution, resolution).clone()
    return OccupancyGrid(resolution=resolution, values=values)


def snapshot_occupancy(
    params: ImplicitDecoder, latent: torch.Tensor, resolution: int
) -> OccupancyGrid:
    """Immutable occupancy snapshot of a decoder; later parameter updates do
    not change the returned grid."""
    return snapshot_field(field_closure(params, latent), resolution)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def decoder_meta(params: ImplicitDecoder) -> dict:
    return {
        "kind": "decoder",
        "topology": params.topology,
        "latent_dim": params.cfg.latent_dim,
        "width": params.cfg.width,
        "hidden_layers": params.cfg.hidden_layers,
        "posenc_bands": params.cfg.posenc_bands,
    }


def save_decoder(path: str, params: ImplicitDecoder, extra_meta: dict = None) -> None:
    from .checkpoint import save_module

    meta = decoder_meta(params)
    meta.update(extra_meta or {})
    save_module(path, params, meta)


def load_decoder(path: str) -> tuple:
    from .checkpoint import load_module_state

    state, meta = load_module_state(path)
    if meta.get("kind") != "decoder":
        raise ContractError(f"{path} is not a decoder checkpoint")
    cfg = FieldConfig(
        latent_dim=meta["latent_dim"],
        width=meta["width"],
        hidden_layers=meta["hidden_layers"],
        posenc_bands=meta["posenc_bands"],
    )
    dec = ImplicitDecoder(cfg, topology=meta["topology"])
    dec.load_state_dict(state)
    return dec, meta
