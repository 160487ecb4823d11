"""Quantitative evaluation: embedding-gap study, latent distance tables,
Fréchet metrics over render embeddings and point-cloud statistics, mIoU,
retrieval-based consistency, novelty retrieval, and diversity.

The Fréchet image metric uses the frozen toy embedder as its backbone, so
absolute values are only comparable across runs of this pipeline, never to
externally reported numbers; all claims are orderings between our own runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .embedder import cosine_distance, embed_image, embed_text
from .errors import ContractError, NumericError
from .field import OccupancyGrid, snapshot_field
from .render import Ray, look_at_camera, march_ray_field, render_field, sample_camera
from .scenes import load_cameras, load_view
from .seeding import derive_seed


def latent_cosine_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """1 - cos(a, b) for arbitrary nonzero vectors (shape latents are not
    unit-norm; embeddings may be passed too)."""
    na = float(torch.linalg.vector_norm(a))
    nb = float(torch.linalg.vector_norm(b))
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine distance undefined for zero vectors")
    return float(1.0 - (a @ b) / (na * nb))


def sign_test_p_value(n_less: int, n_greater: int) -> float:
    """One-sided exact sign test: P[X >= n_less | n, p=1/2] where X counts
    pairs in the claimed direction; ties are dropped by the caller."""
    n = n_less + n_greater
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(n_less, n + 1)) / 2.0 ** n


# ---------------------------------------------------------------------------
# Embedding gap study
# ---------------------------------------------------------------------------

def gap_study(embedder, manifest, split: str = "val", repeats: int = 3, seed: int = 0):
    """Mean cosine distance between matched (text, rendered view) embedding
    pairs, repeated with independently sampled views; returns
    {"per_repeat": [...], "mean": m, "std": s}."""
    entries = manifest.by_split(split)
    means = []
    for rep in range(repeats):
        rng = np.random.default_rng(derive_seed(seed, "gap", rep))
        dists = []
        for e in entries:
            k = int(rng.integers(0, len(e.view_paths)))
            img = load_view(manifest, e, k)
            with torch.no_grad():
                f_i = embed_image(embedder, img)
                f_t = embed_text(embedder, e.caption)
            dists.append(float(cosine_distance(f_t, f_i)))
        means.append(float(np.mean(dists)))
    return {
        "per_repeat": means,
        "mean": float(np.mean(means)),
        "std": float(np.std(means)),
    }


# ---------------------------------------------------------------------------
# Distance table (stage-wise latent gaps)
# ---------------------------------------------------------------------------

@dataclass
class DistanceRow:
    caption: str
    d_mfi_mft: float
    d_mfi_fs: float
    d_mft_fs: float
    d_mpft_fs: float
    d_mft_mpft: float


@dataclass
class DistanceReport:
    rows: list
    mean: dict
    std: dict

    COLUMNS = ("d_mfi_mft", "d_mfi_fs", "d_mft_fs", "d_mpft_fs", "d_mft_mpft")

    def to_csv(self) -> str:
        lines = ["caption," + ",".join(self.COLUMNS)]
        for r in self.rows:
            vals = ",".join(f"{getattr(r, c):.6f}" for c in self.COLUMNS)
            lines.append(f"{r.caption},{vals}")
        lines.append(
            "mean," + ",".join(f"{self.mean[c]:.6f}" for c in self.COLUMNS)
        )
        lines.append("std," + ",".join(f"{self.std[c]:.6f}" for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


def best_matching_view(embedder, manifest, entry) -> int:
    """Index of the ground-truth view whose image embedding is closest to
    the caption embedding (the evaluation anchor for f_S)."""
    with torch.no_grad():
        f_t = embed_text(embedder, entry.caption)
        sims = []
        for k in range(len(entry.view_paths)):
            f_i = embed_image(embedder, load_view(manifest, entry, k))
            sims.append(float(f_t @ f_i))
    return int(np.argmax(sims))


def distance_table(
    captions_entries,
    mapper,
    mapper_primes: dict,
    embedder,
    svr_encoder,
    manifest,
) -> DistanceReport:
    """Per-caption cosine distances between mapped embeddings and the
    ground-truth shape latent; mapper_primes maps caption text -> aligned
    mapper (missing captions are skipped with a warning row count drop)."""
    from .alignment import map_embedding
    from .svr import encode_image

    rows = []
    for entry in captions_entries:
        text = entry.caption.text
        if text not in mapper_primes:
            continue
        k = best_matching_view(embedder, manifest, entry)
        img = load_view(manifest, entry, k)
        with torch.no_grad():
            f_t = embed_text(embedder, entry.caption)
            f_i = embed_image(embedder, img)
            f_s = encode_image(svr_encoder, img)
            m_fi = map_embedding(mapper, f_i)
            m_ft = map_embedding(mapper, f_t)
            mp_ft = map_embedding(mapper_primes[text], f_t)
        rows.append(
            DistanceRow(
                caption=text,
                d_mfi_mft=latent_cosine_distance(m_fi, m_ft),
                d_mfi_fs=latent_cosine_distance(m_fi, f_s),
                d_mft_fs=latent_cosine_distance(m_ft, f_s),
                d_mpft_fs=latent_cosine_distance(mp_ft, f_s),
                d_mft_mpft=latent_cosine_distance(m_ft, mp_ft),
            )
        )
    mean = {
        c: float(np.mean([getattr(r, c) for r in rows])) for c in DistanceReport.COLUMNS
    }
    std = {
        c: float(np.std([getattr(r, c) for r in rows])) for c in DistanceReport.COLUMNS
    }
    return DistanceReport(rows=rows, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Fréchet metrics
# ---------------------------------------------------------------------------

def _sqrtm_product_trace(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((Sigma_a Sigma_b)^(1/2)) via eigen-decomposition of the symmetrized
    product A^(1/2) Sigma_b A^(1/2); eigenvalues below -1e-8 raise, small
    negatives clip to zero."""
    wa, va = np.linalg.eigh(sigma_a)
    if wa.min() < -1e-8:
        raise NumericError("covariance has a significantly negative eigenvalue")
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    sym = root_a @ sigma_b @ root_a
    w = np.linalg.eigvalsh(sym)
    if w.min() < -1e-8:
        raise NumericError("symmetrized product has a negative eigenvalue")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(
    features_a, features_b, shrinkage: bool = False, shrink_eps: float = 0.05
) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    Each set needs at least dim + 1 samples for a full-rank covariance;
    smaller sets require shrinkage=True (adds shrink_eps * mean-diagonal
    ridge), otherwise a NumericError is raised.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError("feature sets must be 2-D with equal dimension")
    dim = a.shape[1]
    if (len(a) < dim + 1 or len(b) < dim + 1) and not shrinkage:
        raise NumericError(
            f"need >= {dim + 1} samples per set for a full-rank covariance "
            "(pass shrinkage=True to regularize)"
        )
    mu_a, mu_b = a.mean(0), b.mean(0)
    sigma_a = np.cov(a, rowvar=False)
    sigma_b = np.cov(b, rowvar=False)
    sigma_a = np.atleast_2d(sigma_a)
    sigma_b = np.atleast_2d(sigma_b)
    if shrinkage:
        ridge_a = shrink_eps * float(np.trace(sigma_a)) / dim + 1e-12
        ridge_b = shrink_eps * float(np.trace(sigma_b)) / dim + 1e-12
        sigma_a = sigma_a + ridge_a * np.eye(dim)
        sigma_b = sigma_b + ridge_b * np.eye(dim)
    diff = float(((mu_a - mu_b) ** 2).sum())
    tr = float(np.trace(sigma_a) + np.trace(sigma_b))
    return diff + tr - 2.0 * _sqrtm_product_trace(sigma_a, sigma_b)


def surface_point_cloud(
    field_fn, n_points: int, seed: int, threshold: float = 0.5,
    max_batches: int = 40,
) -> torch.Tensor:
    """Surface samples via ray marching from random directions on the scene
    bounding sphere toward jittered interior targets. Returns (M, 3) with
    M <= n_points (empty fields give M = 0)."""
    rng = np.random.default_rng(int(seed))
    pts = []
    have = 0
    for _ in range(max_batches):
        if have >= n_points:
            break
        dirs = rng.normal(size=(64, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        targets = rng.uniform(-0.2, 0.2, size=(64, 3))
        for d, tgt in zip(dirs, targets):
            origin = torch.tensor(d * 1.5, dtype=torch.float64)
            look = torch.tensor(tgt, dtype=torch.float64) - origin
            look = look / look.norm()
            ray = Ray(origin=origin, direction=look, near=0.3, far=2.8)
            hit = march_ray_field(field_fn, ray, threshold, samples_per_ray=96)
            if hit is not None:
                pts.append(hit.point.float())
                have += 1
                if have >= n_points:
                    break
    if not pts:
        return torch.zeros(0, 3)
    return torch.stack(pts)


def point_statistics(points: torch.Tensor, n_radial_bins: int = 32) -> np.ndarray:
    """Per-shape feature: centroid (3) + axis-aligned second moments (3) +
    normalized radial histogram about the centroid (n_radial_bins)."""
    p = points.numpy().astype(np.float64)
    centroid = p.mean(0)
    second = ((p - centroid) ** 2).mean(0)
    radii = np.linalg.norm(p - centroid, axis=1)
    hist, _ = np.histogram(radii, bins=n_radial_bins, range=(0.0, 1.0))
    hist = hist / max(len(radii), 1)
    return np.concatenate([centroid, second, hist])


def frechet_point_metric(
    shapes_a, shapes_b, n_points: int = 512, seed: int = 0,
    threshold: float = 0.5,
) -> float:
    """Fréchet distance between point-statistics features of two shape sets
    (each shape a field callable). Shapes with no surface are excluded."""
    import warnings as _warnings

    def features(shapes, tag):
        feats = []
        for i, fn in enumerate(shapes):
            # sampling seed depends on the index only, so identical shape
            # sets yield identical features (and a zero distance)
            pts = surface_point_cloud(
                fn, n_points, derive_seed(seed, "fpd", i), threshold
            )
            if pts.shape[0] < 8:
                _warnings.warn(f"shape {tag}/{i} has no surface; excluded")
                continue
            feats.append(point_statistics(pts))
        if not feats:
            raise NumericError("no shapes with surfaces to compare")
        return np.stack(feats)

    return frechet_distance(features(shapes_a, "a"), features(shapes_b, "b"),
                            shrinkage=True)


# ---------------------------------------------------------------------------
# mIoU / retrieval / novelty / diversity
# ---------------------------------------------------------------------------

def compute_miou(grid_a: OccupancyGrid, grid_b: OccupancyGrid, t: float) -> float:
    """Intersection over union of the superlevel sets; both-empty counts as
    1.0 by convention."""
    if grid_a.resolution != grid_b.resolution:
        raise ContractError("grid resolutions differ")
    a = grid_a.values > t
    b = grid_b.values > t
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float(int((a & b).sum()) / union)


def mean_view_embedding(embedder, field_fn, seed: int, n_views: int = 5,
                        samples_per_ray: int = 32):
    """Average image embedding of n_views renders from seeded cameras."""
    res = embedder.cfg.image_resolution
    feats = []
    for j in range(n_views):
        pose = sample_camera(
            derive_seed(seed, "eval-view", j), resolution=(res, res)
        )
        view = render_field(field_fn, pose, torch.ones(3), samples_per_ray)
        with torch.no_grad():
            feats.append(embed_image(embedder, view.rgb.clamp(0, 1)))
    return torch.stack(feats).mean(0)


def retrieval_consistency(
    shapes_with_captions, embedder, candidate_captions, seed: int = 0,
    n_views: int = 5,
) -> float:
    """Top-1 accuracy of ranking candidate captions by similarity to the
    mean embedding of rendered views; a hit is any top-ranked caption whose
    text equals the true caption."""
    if len(candidate_captions) < 2:
        raise ContractError("need at least 2 candidate captions")
    with torch.no_grad():
        cand = torch.stack([embed_text(embedder, c) for c in candidate_captions])
    texts = [c.text if hasattr(c, "text") else str(c) for c in candidate_captions]
    hits = 0
    for i, (field_fn, true_caption) in enumerate(shapes_with_captions):
        f = mean_view_embedding(embedder, field_fn, derive_seed(seed, "rc", i), n_views)
        best = int((cand @ f).argmax())
        true_text = (
            true_caption.text if hasattr(true_caption, "text") else str(true_caption)
        )
        hits += texts[best] == true_text
    return hits / len(shapes_with_captions)


def novelty_retrieval(
    field_fn, manifest, embedder, k: int = 3, seed: int = 0, n_views: int = 5
):
    """Rank training scenes by mean rendered-view embedding similarity to
    the query shape; returns the top-k scene ids with scores."""
    if k < 1:
        raise ContractError("k must be >= 1")
    query = mean_view_embedding(embedder, field_fn, derive_seed(seed, "query"), n_views)
    scored = []
    for e in manifest.by_split("train"):
        feats = []
        for kk in range(min(n_views, len(e.view_paths))):
            img = load_view(manifest, e, kk)
            with torch.no_grad():
                feats.append(embed_image(embedder, img))
        mean_feat = torch.stack(feats).mean(0)
        scored.append((e.scene_id, float(query @ mean_feat)))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


def diversity_score(grids, t: float = 0.5) -> float:
    """Mean pairwise occupancy IoU complement across shapes generated from
    one caption; 0 for identical shapes, bounded by 1."""
    if len(grids) < 2:
        raise ContractError("need at least 2 shapes")
    vals = []
    for i in range(len(grids)):
        for j in range(i + 1, len(grids)):
            vals.append(1.0 - compute_miou(grids[i], grids[j], t))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Color / hue helpers
# ---------------------------------------------------------------------------

def dominant_foreground_hue(view) -> float:
    """Circular-mean hue (degrees) of foreground pixels."""
    rgb = view.rgb[view.fg_mask]
    if rgb.shape[0] == 0:
        raise ContractError("view has no foreground pixels")
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    mx, _ = rgb.max(dim=1)
    mn, _ = rgb.min(dim=1)
    delta = (mx - mn).clamp(min=1e-8)
    hue = torch.where(
        mx == r, (g - b) / delta % 6.0,
        torch.where(mx == g, (b - r) / delta + 2.0, (r - g) / delta + 4.0),
    ) * 60.0
    rad = hue * math.pi / 180.0
    mean = math.atan2(float(torch.sin(rad).mean()), float(torch.cos(rad).mean()))
    return (math.degrees(mean)) % 360.0


def hue_delta(h1: float, h2: float) -> float:
    d = abs(h1 - h2) % 360.0
    return min(d, 360.0 - d)


# ---------------------------------------------------------------------------
# Mesh export
# ---------------------------------------------------------------------------

def export_surface_mesh(grid: OccupancyGrid, path: str, t: float = 0.5) -> int:
    """Marching-cubes isosurface of an occupancy grid, written as OBJ.
    Returns the number of triangles (0 if the level set is empty)."""
    from skimage import measure

    vals = grid.values.numpy()
    if vals.max() <= t or vals.min() >= t:
        with open(path, "w") as f:
            f.write("# empty level set\n")
        return 0
    verts, faces, _, _ = measure.marching_cubes(vals, level=t)
    verts = verts / grid.resolution - 0.5
    with open(path, "w") as f:
        for v in verts:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
    return len(faces)
