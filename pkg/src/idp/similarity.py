"""Vector similarity and exact top-k selection with a deterministic tie rule."""
from __future__ import annotations

import numpy as np

COSINE = "cosine"
DOT = "dot"


def normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def pairwise(a: np.ndarray, b: np.ndarray, kind: str = COSINE) -> np.ndarray:
    """Similarity matrix between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if kind == COSINE:
        return normalize(a) @ normalize(b).T
    if kind == DOT:
        return a @ b.T
    raise ValueError(f"unknown similarity {kind!r}")


def top_k_row(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, descending; ties go to the lower index."""
    n = len(row)
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        kth = np.partition(row, n - k)[n - k]
        cand = np.flatnonzero(row >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -row[cand]))
    return cand[order[:k]].astype(np.int64)


def top_k(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`top_k_row`; returns ``(indices, values)``."""
    sims = np.atleast_2d(sims)
    idx = np.stack([top_k_row(r, k) for r in sims]) if len(sims) else np.zeros((0, min(k, sims.shape[1])), np.int64)
    vals = np.take_along_axis(sims, idx, axis=1) if len(sims) else np.zeros(idx.shape)
    return idx, vals
