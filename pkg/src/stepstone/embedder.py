"""Joint text-image embedder: paired towers trained contrastively over the
closed caption vocabulary, producing comparable unit-norm features.

Stands in for a large pretrained vision-language model: frozen after
training, never fine-tuned downstream. Downstream stages verify the params
digest before use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, params_digest, save_module
from .errors import ContractError, TrainingDivergence, VocabularyError
from .scenes import VOCABULARY, Caption, load_view
from .seeding import derive_seed, generator


@dataclass(frozen=True)
class EmbedderConfig:
    embed_dim: int = 64
    image_resolution: int = 64
    channels: int = 16
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    min_val_retrieval: float = 0.9  # None disables the quality gate
    val_batch: int = 32


class _ConvTower(nn.Module):
    """Strided conv feature extractor shared by the image towers (the SVR
    encoder reuses the same body so encoder comparisons isolate the training
    objective). pool="mean" averages the final feature map; pool="flatten"
    keeps its spatial layout (needed when the output must carry precise
    geometry)."""

    def __init__(self, out_dim: int, channels: int = 16, resolution: int = 64,
                 pool: str = "mean"):
        super().__init__()
        c = channels
        self.resolution = resolution
        self.pool = pool
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1), nn.ReLU(),
        )
        spatial = (resolution // 16) ** 2
        in_dim = 4 * c if pool == "mean" else 4 * c * spatial
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, H, W, 3) in [0, 1]
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ContractError("images must be (B, H, W, 3)")
        if images.shape[1] != self.resolution or images.shape[2] != self.resolution:
            raise ContractError(
                f"image resolution {tuple(images.shape[1:3])} != "
                f"({self.resolution}, {self.resolution})"
            )
        x = images.permute(0, 3, 1, 2)
        h = self.net(x)
        if self.pool == "mean":
            h = h.mean(dim=(2, 3))
        else:
            h = h.flatten(1)
        return self.fc(h)


class _TextTower(nn.Module):
    def __init__(self, vocab, out_dim: int):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.embedding = nn.Embedding(len(self.vocab), out_dim)
        self.mlp = nn.Sequential(
            nn.Linear(out_dim, 2 * out_dim), nn.ReLU(), nn.Linear(2 * out_dim, out_dim)
        )

    def tokenize(self, text: str) -> torch.Tensor:
        tokens = text.split()
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise VocabularyError(unknown)
        return torch.tensor([self.index[t] for t in tokens], dtype=torch.long)

    def forward(self, token_batches) -> torch.Tensor:
        pooled = torch.stack(
            [self.embedding(toks).mean(dim=0) for toks in token_batches]
        )
        return self.mlp(pooled)


class JointEmbedder(nn.Module):
    def __init__(self, cfg: EmbedderConfig = EmbedderConfig(), vocab=VOCABULARY):
        super().__init__()
        self.cfg = cfg
        self.image_tower = _ConvTower(
            cfg.embed_dim, channels=cfg.channels, resolution=cfg.image_resolution
        )
        self.text_tower = _TextTower(vocab, cfg.embed_dim)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(0.07)))

    @property
    def vocab(self):
        return self.text_tower.vocab

    @property
    def temperature(self) -> float:
        return float(self.log_temperature.exp())


def embed_image(params: JointEmbedder, image: torch.Tensor) -> torch.Tensor:
    """Unit-norm embedding of an (H, W, 3) image (or (B, H, W, 3) batch) in
    [0, 1]. Differentiable w.r.t. the image."""
    single = image.dim() == 3
    batch = image[None] if single else image
    with torch.no_grad():
        lo, hi = float(batch.min()), float(batch.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ContractError("image values must lie in [0, 1]")
    feats = F.normalize(params.image_tower(batch), dim=-1)
    return feats[0] if single else feats


def embed_text(params: JointEmbedder, caption) -> torch.Tensor:
    """Unit-norm embedding of a caption (Caption or raw string)."""
    text = caption.text if isinstance(caption, Caption) else str(caption)
    toks = params.text_tower.tokenize(text)
    feats = F.normalize(params.text_tower([toks]), dim=-1)
    return feats[0]


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - <a, b> for unit-norm embeddings; range [0, 2]."""
    for v in (a, b):
        if abs(float(torch.linalg.vector_norm(v)) - 1.0) > 1e-3:
            raise ContractError("cosine_distance requires unit-norm inputs")
    return 1.0 - (a * b).sum()


# ---------------------------------------------------------------------------
# Contrastive training
# ---------------------------------------------------------------------------

def _load_split_views(manifest, split):
    """All (image uint8, caption text) pairs of a split, in manifest order."""
    images, captions, scene_ids = [], [], []
    for e in manifest.by_split(split):
        for k in range(len(e.view_paths)):
            img = load_view(manifest, e, k)
            images.append((img * 255).round().to(torch.uint8))
            captions.append(e.caption.text)
            scene_ids.append(e.scene_id)
    return torch.stack(images), captions, scene_ids


def retrieval_accuracy(
    params: JointEmbedder, images_u8, captions, batch_size: int, seed: int
) -> float:
    """In-batch image->text top-1 retrieval; a hit is any candidate whose
    caption text equals the true caption (duplicates are not misses)."""
    n = len(captions)
    batch_size = min(batch_size, n)
    if batch_size < 2:
        raise ContractError("retrieval accuracy needs at least 2 samples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    hits, total = 0, 0
    with torch.no_grad():
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            imgs = images_u8[idx].float() / 255.0
            f_i = embed_image(params, imgs)
            f_t = torch.stack([embed_text(params, captions[i]) for i in idx])
            sims = f_i @ f_t.T
            best = sims.argmax(dim=1)
            for row, b in enumerate(best.tolist()):
                hits += captions[idx[row]] == captions[idx[b]]
                total += 1
    return hits / max(total, 1)


def train_contrastive(manifest, cfg: EmbedderConfig, seed: int) -> JointEmbedder:
    """Symmetric InfoNCE over (rendered view, caption) pairs.

    Raises TrainingDivergence on NaN loss or if the post-training val
    retrieval gate fails.
    """
    train = manifest.by_split("train")
    if not train:
        raise ContractError("train split is empty")
    params = _init_embedder(cfg, seed)
    images_u8, captions, _ = _load_split_views(manifest, "train")
    val_images, val_captions, _ = _load_split_views(manifest, "val")

    text_cache = {c: params.text_tower.tokenize(c) for c in set(captions)}
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(seed, "embedder-batches"))
    n = len(captions)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            imgs = images_u8[idx].float() / 255.0
            f_i = embed_image(params, imgs)
            f_t = F.normalize(
                params.text_tower([text_cache[captions[i]] for i in idx]), dim=-1
            )
            logits = (f_i @ f_t.T) / params.log_temperature.exp()
            target = torch.arange(len(idx))
            loss = 0.5 * (
                F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)
            )
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    "contrastive loss is not finite",
                    {"epoch": epoch, "step": start // cfg.batch_size},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

    acc = retrieval_accuracy(
        params, val_images, val_captions, cfg.val_batch, derive_seed(seed, "val-batches")
    )
    if cfg.min_val_retrieval is not None and acc < cfg.min_val_retrieval:
        raise TrainingDivergence(
            f"val retrieval accuracy {acc:.3f} below gate {cfg.min_val_retrieval}",
            {"val_retrieval_top1": acc},
        )
    params.eval()
    for p in params.parameters():
        p.requires_grad_(False)
    params._val_retrieval_top1 = acc
    return params


def _init_embedder(cfg: EmbedderConfig, seed: int) -> JointEmbedder:
    torch.manual_seed(derive_seed(seed, "embedder-init"))
    return JointEmbedder(cfg)


def save_embedder(path: str, params: JointEmbedder, extra_meta: dict = None) -> None:
    meta = {
        "kind": "embedder",
        "embed_dim": params.cfg.embed_dim,
        "image_resolution": params.cfg.image_resolution,
        "channels": params.cfg.channels,
        "vocab": list(params.vocab),
        "val_retrieval_top1": getattr(params, "_val_retrieval_top1", None),
    }
    meta.update(extra_meta or {})
    save_module(path, params, meta)


def load_embedder(path: str) -> tuple:
    state, meta = load_module_state(path)
    if meta.get("kind") != "embedder":
        raise ContractError(f"{path} is not an embedder checkpoint")
    cfg = EmbedderConfig(
        embed_dim=meta["embed_dim"],
        image_resolution=meta["image_resolution"],
        channels=meta["channels"],
    )
    params = JointEmbedder(cfg, vocab=tuple(meta["vocab"]))
    params.load_state_dict(state)
    params.eval()
    for p in params.parameters():
        p.requires_grad_(False)
    return params, meta


def embedder_digest(params: JointEmbedder) -> str:
    return params_digest(params)
