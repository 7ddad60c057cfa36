"""Small tensor helpers shared by the recommender and the matcher."""
from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None, active: bool) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not active or p <= 0.0:
        return x
    if p >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return F.gelu(x, approximate="none")


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def state_checksum(tensors: dict[str, torch.Tensor | np.ndarray]) -> str:
    """SHA-256 over names and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
