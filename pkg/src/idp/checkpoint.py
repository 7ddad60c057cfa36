"""The IDPCKPT1 tensor container.

Layout: the 8 magic bytes ``IDPCKPT1``, a little-endian uint64 header length,
a UTF-8 JSON header ``{"version", "meta", "tensors": [{"name", "dtype", "shape"}]}``,
then each tensor's raw little-endian row-major bytes in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"IDPCKPT1"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CheckpointError(ValueError):
    pass


def _as_array(t: torch.Tensor | np.ndarray) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype not in _TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr


def dumps(tensors: Mapping[str, torch.Tensor | np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    arrays = {name: _as_array(t) for name, t in tensors.items()}
    header = {
        "version": VERSION,
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "dtype": _TAGS[a.dtype], "shape": list(a.shape)} for n, a in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic: not an IDPCKPT1 file")
    if len(data) < 16:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    pos = 16 + hlen
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"tensor {entry['name']}: unknown dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"tensor {entry['name']}: payload truncated")
        out[entry["name"]] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out, header["meta"]


def save(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
