"""Bit-stable checkpoint files: JSON header + raw little-endian tensor data.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header
(sorted keys), then tensor payloads concatenated in header order. The header
records each tensor's name/shape/dtype plus a SHA-256 of the payload, so
truncation and corruption surface as IntegrityError, and save/load/save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"STPCKPT1"

_DTYPES = {
    "float32": (np.float32, torch.float32),
    "float64": (np.float64, torch.float64),
    "int64": (np.int64, torch.int64),
    "uint8": (np.uint8, torch.uint8),
    "bool": (np.bool_, torch.bool),
}
_TORCH_NAMES = {t: name for name, (_, t) in _DTYPES.items()}


def save(path: str, tensors: dict, meta: dict = None) -> None:
    names = sorted(tensors)
    blobs = []
    specs = []
    for name in names:
        t = tensors[name]
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        dtype_name = arr.dtype.name if arr.dtype.name != "bool_" else "bool"
        if dtype_name not in _DTYPES:
            raise IntegrityError(f"unsupported tensor dtype {arr.dtype} for {name}")
        blob = np.ascontiguousarray(arr).tobytes()
        specs.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name})
        blobs.append(blob)
    data = b"".join(blobs)
    header = {
        "meta": meta or {},
        "tensors": specs,
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = (
        MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + data
    )
    _atomic_write(path, payload)


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> tuple:
    """Return (tensors dict, meta dict); verifies structure and data digest."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: bad magic or truncated header")
    hlen = int.from_bytes(raw[8:16], "little")
    if len(raw) < 16 + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    data = raw[16 + hlen :]
    if hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise IntegrityError(f"{path}: data digest mismatch")
    tensors = {}
    offset = 0
    for spec in header["tensors"]:
        np_dtype, torch_dtype = _DTYPES[spec["dtype"]]
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(data):
            raise IntegrityError(f"{path}: truncated tensor data for {spec['name']}")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=np_dtype).reshape(
            spec["shape"]
        )
        tensors[spec["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        offset += nbytes
    if offset != len(data):
        raise IntegrityError(f"{path}: trailing bytes after tensor data")
    return tensors, header["meta"]


def save_module(path: str, module: torch.nn.Module, meta: dict = None) -> None:
    save(path, dict(module.state_dict()), meta)


def load_module_state(path: str) -> tuple:
    tensors, meta = load(path)
    return tensors, meta


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def params_digest(module: torch.nn.Module) -> str:
    """Stable digest of a module's parameters and buffers."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        arr = state[name].detach().cpu().numpy()
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def checkpoint_roundtrip(path: str) -> tuple:
    """Load a checkpoint, re-serialize it, and verify byte stability.

    Returns (tensors, meta) on success; raises IntegrityError otherwise.
    """
    tensors, meta = load(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".rt-")
    os.close(fd)
    try:
        save(tmp, tensors, meta)
        if file_digest(tmp) != file_digest(path):
            raise IntegrityError(f"{path}: re-serialization is not byte-stable")
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return tensors, meta
