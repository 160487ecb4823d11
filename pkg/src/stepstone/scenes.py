"""Procedural primitive-shape world: specs, captions, analytic occupancy,
and multi-view dataset construction.

Every scene is a colored primitive (or box-composite) inside the unit cube
centered at the origin. Ground-truth views are rendered from the closed-form
occupancy test of the spec, never from a learned field, so the dataset itself
is an exact oracle.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CategoryError, ConfigError, ContractError

CATEGORIES = ("box", "sphere", "cylinder", "cone", "torus", "table", "chair")
COMPOSITE_CATEGORIES = ("table", "chair")

# Closed 8-color palette. White is deliberately absent: the background is
# white and flat-albedo objects must stay separable from it.
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
PALETTE_NAMES = tuple(PALETTE)

SIZE_WORDS = ("small", "medium", "big")
# Bucket boundaries on the raw first size parameter (which lives in
# [PARAM_LO, PARAM_HI]): [0.2, 0.45) small, [0.45, 0.72) medium, else big.
SIZE_BUCKET_EDGES = (0.45, 0.72)

PARAM_LO, PARAM_HI = 0.2, 1.0

# Number of size parameters drawn per category.
N_SIZE_PARAMS = {
    "box": 3,
    "sphere": 1,
    "cylinder": 2,
    "cone": 2,
    "torus": 2,
    "table": 2,
    "chair": 2,
}

# Closed caption vocabulary (also consumed by the joint embedder and the
# stylization prompt template).
VOCABULARY = (
    ("a", "imitating", "with", "four", "legs")
    + SIZE_WORDS
    + PALETTE_NAMES
    + CATEGORIES
)

# Everything fits inside a sphere of this radius (cube circumsphere + margin);
# the renderer uses it to bound ray sampling.
SCENE_BOUND_RADIUS = 0.88


def _affine(p: float, lo: float, hi: float) -> float:
    """Map a raw size parameter from [PARAM_LO, PARAM_HI] to [lo, hi]."""
    return lo + (hi - lo) * (p - PARAM_LO) / (PARAM_HI - PARAM_LO)


@dataclass(frozen=True)
class SceneSpec:
    category: str
    size_params: tuple
    color_name: str
    pose: float  # rotation about the vertical (z) axis, radians

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise CategoryError(f"unknown category {self.category!r}")
        if len(self.size_params) != N_SIZE_PARAMS[self.category]:
            raise ContractError(
                f"{self.category} takes {N_SIZE_PARAMS[self.category]} size "
                f"params, got {len(self.size_params)}"
            )
        for p in self.size_params:
            if not (PARAM_LO <= p <= PARAM_HI):
                raise ContractError(f"size param {p} outside [{PARAM_LO}, {PARAM_HI}]")
        if self.color_name not in PALETTE:
            raise ContractError(f"color {self.color_name!r} not in palette")

    @property
    def color(self) -> tuple:
        return PALETTE[self.color_name]

    @property
    def size_bucket(self) -> str:
        p = self.size_params[0]
        if p < SIZE_BUCKET_EDGES[0]:
            return "small"
        if p < SIZE_BUCKET_EDGES[1]:
            return "medium"
        return "big"

    def to_json(self) -> dict:
        return {
            "category": self.category,
            "size_params": list(self.size_params),
            "color_name": self.color_name,
            "pose": self.pose,
        }

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        return SceneSpec(
            category=d["category"],
            size_params=tuple(d["size_params"]),
            color_name=d["color_name"],
            pose=float(d["pose"]),
        )


@dataclass(frozen=True)
class Caption:
    text: str
    scene_id: str = ""

    @property
    def tokens(self) -> tuple:
        return tuple(self.text.split())


def make_scene_spec(seed: int, category: str) -> SceneSpec:
    """Deterministically draw a scene spec for (seed, category).

    Draw order (documented so tests can replay it): size params, palette
    index, pose.
    """
    if category not in CATEGORIES:
        raise CategoryError(f"unknown category {category!r}")
    rng = np.random.default_rng((int(seed), CATEGORIES.index(category)))
    n = N_SIZE_PARAMS[category]
    params = tuple(float(x) for x in rng.uniform(PARAM_LO, PARAM_HI, n))
    color = PALETTE_NAMES[int(rng.integers(0, len(PALETTE_NAMES)))]
    pose = float(rng.uniform(0.0, 2.0 * math.pi))
    return SceneSpec(category=category, size_params=params, color_name=color, pose=pose)


def generate_caption(spec: SceneSpec, scene_id: str = "") -> Caption:
    """Template caption "a [size] [color] [category]" (+ "with four legs"
    for box-composites). Every word decodes back to a spec attribute."""
    words = ["a", spec.size_bucket, spec.color_name, spec.category]
    if spec.category in COMPOSITE_CATEGORIES:
        words += ["with", "four", "legs"]
    return Caption(text=" ".join(words), scene_id=scene_id)


def decode_caption(text: str) -> dict:
    """Invert generate_caption: recover (category, color name, size bucket)."""
    tokens = text.split()
    if len(tokens) < 4 or tokens[0] != "a":
        raise ContractError(f"caption does not match template: {text!r}")
    size, color, category = tokens[1], tokens[2], tokens[3]
    if size not in SIZE_WORDS:
        raise ContractError(f"unknown size word {size!r}")
    if color not in PALETTE:
        raise ContractError(f"unknown color word {color!r}")
    if category not in CATEGORIES:
        raise CategoryError(f"unknown category word {category!r}")
    rest = tokens[4:]
    if rest and tuple(rest) != ("with", "four", "legs"):
        raise ContractError(f"unknown attribute clause: {' '.join(rest)!r}")
    return {"category": category, "color_name": color, "size_bucket": size}


# ---------------------------------------------------------------------------
# Analytic geometry
# ---------------------------------------------------------------------------

def world_dimensions(spec: SceneSpec) -> dict:
    """Map raw size params to world-unit dimensions (all geometry fits inside
    the unit cube under any pose rotation)."""
    p = spec.size_params
    c = spec.category
    if c == "sphere":
        return {"radius": _affine(p[0], 0.2, 0.5)}
    if c == "box":
        return {
            "edges": (
                _affine(p[0], 0.3, 0.7),
                _affine(p[1], 0.3, 0.7),
                _affine(p[2], 0.3, 1.0),
            )
        }
    if c == "cylinder":
        return {"radius": _affine(p[0], 0.15, 0.45), "height": _affine(p[1], 0.4, 1.0)}
    if c == "cone":
        return {"radius": _affine(p[0], 0.15, 0.45), "height": _affine(p[1], 0.4, 1.0)}
    if c == "torus":
        minor = _affine(p[1], 0.08, 0.14)
        major = _affine(p[0], 0.15, 0.5 - minor)
        return {"major": major, "minor": minor}
    if c == "table":
        return {"width": _affine(p[0], 0.4, 0.7), "height": _affine(p[1], 0.4, 1.0)}
    if c == "chair":
        return {"width": _affine(p[0], 0.35, 0.6), "height": _affine(p[1], 0.5, 1.0)}
    raise CategoryError(c)


def composite_parts(spec: SceneSpec) -> list:
    """Axis-aligned box parts (center, half-extents) of a composite, in the
    spec's local (un-posed) frame."""
    dims = world_dimensions(spec)
    c = spec.category
    parts = []
    if c == "table":
        w, h = dims["width"], dims["height"]
        th = 0.16 * h  # top slab thickness
        a = 0.18 * w   # leg cross-section (stout enough for 64^2 silhouettes)
        parts.append(((0.0, 0.0, h / 2 - th / 2), (w / 2, w / 2, th / 2)))
        leg_hz = (h - th) / 2
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(
                    ((sx * (w / 2 - a / 2), sy * (w / 2 - a / 2), -th / 2),
                     (a / 2, a / 2, leg_hz))
                )
    elif c == "chair":
        w, h = dims["width"], dims["height"]
        st = 0.12 * h          # seat thickness
        seat_top = -h / 2 + 0.45 * h
        a = 0.18 * w           # leg cross-section
        bt = 0.16 * w          # backrest thickness
        parts.append(((0.0, 0.0, seat_top - st / 2), (w / 2, w / 2, st / 2)))
        leg_hz = (0.45 * h - st) / 2
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(
                    ((sx * (w / 2 - a / 2), sy * (w / 2 - a / 2), -h / 2 + leg_hz),
                     (a / 2, a / 2, leg_hz))
                )
        back_hz = (h / 2 - seat_top) / 2
        parts.append(
            ((-(w / 2 - bt / 2), 0.0, seat_top + back_hz), (bt / 2, w / 2, back_hz))
        )
    else:
        raise CategoryError(f"{c} is not a composite category")
    return parts


def occupancy(spec: SceneSpec, points: torch.Tensor) -> torch.Tensor:
    """Closed-form inside/outside test at world points (N, 3) -> float {0,1}.

    The pose rotation about z is undone before testing the local geometry.
    """
    pts = torch.as_tensor(points, dtype=torch.float64)
    cos_a, sin_a = math.cos(-spec.pose), math.sin(-spec.pose)
    x = cos_a * pts[..., 0] - sin_a * pts[..., 1]
    y = sin_a * pts[..., 0] + cos_a * pts[..., 1]
    z = pts[..., 2]
    dims = world_dimensions(spec)
    c = spec.category
    if c == "sphere":
        inside = x * x + y * y + z * z <= dims["radius"] ** 2
    elif c == "box":
        ex, ey, ez = dims["edges"]
        inside = (x.abs() <= ex / 2) & (y.abs() <= ey / 2) & (z.abs() <= ez / 2)
    elif c == "cylinder":
        inside = (x * x + y * y <= dims["radius"] ** 2) & (z.abs() <= dims["height"] / 2)
    elif c == "cone":
        r, h = dims["radius"], dims["height"]
        frac = (h / 2 - z) / h  # 1 at base (z=-h/2), 0 at apex (z=+h/2)
        inside = (z.abs() <= h / 2) & (x * x + y * y <= (r * frac).clamp(min=0.0) ** 2)
    elif c == "torus":
        ring = torch.sqrt(x * x + y * y) - dims["major"]
        inside = ring * ring + z * z <= dims["minor"] ** 2
    else:
        inside = torch.zeros_like(z, dtype=torch.bool)
        for (cx, cy, cz), (hx, hy, hz) in composite_parts(spec):
            inside |= (
                ((x - cx).abs() <= hx)
                & ((y - cy).abs() <= hy)
                & ((z - cz).abs() <= hz)
            )
    return inside.to(points.dtype if torch.is_tensor(points) else torch.float32)


def analytic_field(spec: SceneSpec):
    """Field callable (points (N,3) -> (occupancy (N,), rgb (N,3))) for the
    renderer, with binary occupancy and flat albedo."""
    color = torch.tensor(spec.color, dtype=torch.float32)

    def field(points: torch.Tensor):
        occ = occupancy(spec, points).to(points.dtype)
        rgb = color.to(points.dtype).expand(points.shape[0], 3)
        return occ, rgb

    return field


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    scene_id: str
    spec: SceneSpec
    caption: Caption
    view_paths: list
    camera_path: str
    split: str


@dataclass
class DatasetManifest:
    root: str
    entries: list = field(default_factory=list)
    seed: int = 0
    n_views: int = 0
    resolution: int = 0

    def by_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def entry(self, scene_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.scene_id == scene_id:
                return e
        raise KeyError(scene_id)


ALLOWED_RESOLUTIONS = (32, 64, 128)
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def _assign_splits(n_scenes: int, seed: int) -> list:
    """Seed-deterministic 80/10/10 split by scene (never by view)."""
    from .seeding import derive_seed

    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(n_scenes)
    n_train = int(round(SPLIT_FRACTIONS[0] * n_scenes))
    n_val = int(round(SPLIT_FRACTIONS[1] * n_scenes))
    splits = [""] * n_scenes
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def build_dataset(
    n_scenes: int,
    n_views: int,
    resolution: int,
    seed: int,
    root: str,
    samples_per_ray: int = 64,
    camera_radius: float = 2.0,
    elevation_range_deg: tuple = (10.0, 50.0),
) -> DatasetManifest:
    """Render the procedural dataset to disk and return its manifest.

    Categories cycle round-robin over scenes; all rendering goes through the
    differentiable renderer against the analytic occupancy oracle.
    """
    from . import render as render_mod
    from .seeding import derive_seed

    if n_scenes < 1:
        raise ContractError("n_scenes must be >= 1")
    if n_views < 2:
        raise ContractError("n_views must be >= 2")
    if resolution not in ALLOWED_RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {ALLOWED_RESOLUTIONS}")

    try:
        os.makedirs(root, exist_ok=True)
        scenes_dir = os.path.join(root, "scenes")
        os.makedirs(scenes_dir, exist_ok=True)
    except OSError as exc:
        raise IOError(f"output directory not writable: {root}") from exc

    elev = (math.radians(elevation_range_deg[0]), math.radians(elevation_range_deg[1]))
    splits = _assign_splits(n_scenes, seed)
    background = torch.ones(3)

    entries = []
    caption_rows = []
    for i in range(n_scenes):
        category = CATEGORIES[i % len(CATEGORIES)]
        spec = make_scene_spec(derive_seed(seed, "spec", i), category)
        scene_id = f"scene_{i:04d}"
        caption = generate_caption(spec, scene_id=scene_id)
        scene_dir = os.path.join(scenes_dir, scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        field_fn = analytic_field(spec)

        view_paths = []
        cam_views = []
        for k in range(n_views):
            pose = render_mod.sample_camera(
                derive_seed(seed, "cam", scene_id, k),
                elevation_range=elev,
                radius=camera_radius,
                resolution=(resolution, resolution),
            )
            view = render_mod.render_field(
                field_fn, pose, background=background, samples_per_ray=samples_per_ray
            )
            rel = os.path.join("scenes", scene_id, f"view_{k}.png")
            render_mod.write_png(os.path.join(root, rel), view.rgb)
            view_paths.append(rel)
            cam_views.append(pose.to_json())
        cam_rel = os.path.join("scenes", scene_id, "cameras.json")
        with open(os.path.join(root, cam_rel), "w") as f:
            json.dump({"views": cam_views}, f, sort_keys=True, separators=(",", ":"))
        caption_rows.append(f"{scene_id}\t{caption.text}")
        entries.append(
            ManifestEntry(
                scene_id=scene_id,
                spec=spec,
                caption=caption,
                view_paths=view_paths,
                camera_path=cam_rel,
                split=splits[i],
            )
        )

    with open(os.path.join(root, "captions.tsv"), "w") as f:
        f.write("\n".join(caption_rows) + "\n")

    manifest = DatasetManifest(
        root=root, entries=entries, seed=seed, n_views=n_views, resolution=resolution
    )
    _write_manifest(manifest)
    return manifest


def _write_manifest(manifest: DatasetManifest) -> None:
    doc = {
        "seed": manifest.seed,
        "n_views": manifest.n_views,
        "resolution": manifest.resolution,
        "entries": [
            {
                "scene_id": e.scene_id,
                "spec": e.spec.to_json(),
                "caption": e.caption.text,
                "view_paths": e.view_paths,
                "camera_path": e.camera_path,
                "split": e.split,
            }
            for e in manifest.entries
        ],
    }
    with open(os.path.join(manifest.root, "manifest.json"), "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_manifest(root: str, validate: bool = True) -> DatasetManifest:
    """Load manifest.json; optionally verify every listed file exists."""
    path = os.path.join(root, "manifest.json")
    with open(path) as f:
        doc = json.load(f)
    entries = []
    seen = {}
    for d in doc["entries"]:
        e = ManifestEntry(
            scene_id=d["scene_id"],
            spec=SceneSpec.from_json(d["spec"]),
            caption=Caption(text=d["caption"], scene_id=d["scene_id"]),
            view_paths=list(d["view_paths"]),
            camera_path=d["camera_path"],
            split=d["split"],
        )
        if e.scene_id in seen:
            raise ContractError(f"scene {e.scene_id} listed twice")
        seen[e.scene_id] = e.split
        if validate:
            for rel in e.view_paths + [e.camera_path]:
                full = os.path.join(root, rel)
                if not os.path.exists(full):
                    raise ContractError(f"manifest lists missing file {rel}")
        entries.append(e)
    return DatasetManifest(
        root=root,
        entries=entries,
        seed=doc["seed"],
        n_views=doc["n_views"],
        resolution=doc["resolution"],
    )


def load_view(manifest: DatasetManifest, entry: ManifestEntry, k: int) -> torch.Tensor:
    """Load view k of a scene as an (H, W, 3) float tensor in [0, 1]."""
    from PIL import Image

    path = os.path.join(manifest.root, entry.view_paths[k])
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_cameras(manifest: DatasetManifest, entry: ManifestEntry) -> list:
    from . import render as render_mod

    with open(os.path.join(manifest.root, entry.camera_path)) as f:
        doc = json.load(f)
    return [render_mod.CameraPose.from_json(v) for v in doc["views"]]
