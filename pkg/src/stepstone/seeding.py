"""Deterministic seed derivation.

All randomness in the pipeline flows from one root seed through named
derivations, so paired ablation runs differ only where intended.
"""

import hashlib

import torch


def derive_seed(root: int, *names) -> int:
    """Derive a child seed from a root seed and a path of names.

    Stable across processes and platforms (pure SHA-256, no hash
    randomization).
    """
    key = str(int(root)) + "/" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int, device="cpu") -> torch.Generator:
    """A torch.Generator seeded with `seed` (never the global RNG)."""
    g = torch.Generator(device=device)
    g.manual_seed(int(seed))
    return g
