"""Top-m retrieval of pre-training items and similarity-weighted embedding synthesis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .hnsw import AnnIndex, BuildParams, build_index
from .similarity import COSINE, pairwise, top_k, top_k_row

logger = logging.getLogger(__name__)

EXACT_LIMIT = 50_000
FALLBACK_EPS = 1e-8


@dataclass
class NeighborAssignment:
    """Row ``r`` maps target ``targets[r]`` to ``sources[r]`` with ``sims[r]``, best first.

    Targets with no vector have an empty row (``lengths[r] == 0``).
    """

    targets: np.ndarray
    sources: np.ndarray
    sims: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def row(self, r: int) -> list[tuple[int, float]]:
        n = self.lengths[r]
        return list(zip(self.sources[r, :n].tolist(), self.sims[r, :n].tolist()))

    def to_tsv(self, path: str | Path, target_names: Sequence[str] | None = None,
               source_names: Sequence[str] | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r, t in enumerate(self.targets.tolist()):
                tname = target_names[t] if target_names is not None else str(t)
                pairs = ",".join(
                    f"{source_names[s] if source_names is not None else s}:{sim:.9g}" for s, sim in self.row(r))
                fh.write(f"{tname}\t{pairs}\n")

    @classmethod
    def from_tsv(cls, path: str | Path) -> "NeighborAssignment":
        targets, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                t, _, rest = line.rstrip("\n").partition("\t")
                targets.append(int(t))
                rows.append([(int(s), float(v)) for s, v in (p.rsplit(":", 1) for p in rest.split(",") if p)])
        width = max((len(r) for r in rows), default=0)
        src = np.zeros((len(rows), width), dtype=np.int64)
        sims = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            for j, (s, v) in enumerate(r):
                src[i, j], sims[i, j] = s, v
        return cls(np.array(targets, dtype=np.int64), src, sims, np.array([len(r) for r in rows], dtype=np.int64))


def retrieve_exact(query: np.ndarray, sources: np.ndarray, m: int, similarity: str = COSINE
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``m`` sources for one query; ties go to the lower source index."""
    if m < 1:
        raise ValueError("m must be >= 1")
    sources = np.atleast_2d(sources)
    if len(sources) == 0:
        raise ValueError("no sources")
    sims = pairwise(query, sources, similarity)[0]
    idx = top_k_row(sims, m)
    return idx, sims[idx]


def retrieve(queries: np.ndarray, sources: np.ndarray, m: int, method: str = "auto",
             similarity: str = COSINE, index: AnnIndex | None = None, params: BuildParams = BuildParams(),
             rng_seed: int = 0, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Top-``m`` for each query row. ``method`` is ``exact``, ``ann`` or ``auto``
    (exact up to :data:`EXACT_LIMIT` sources)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    queries = np.atleast_2d(queries)
    if method == "auto":
        method = "exact" if len(sources) <= EXACT_LIMIT and index is None else "ann"
    if method == "exact":
        idx_parts, sim_parts = [], []
        for s in range(0, len(queries), chunk):
            i, v = top_k(pairwise(queries[s:s + chunk], sources, similarity), m)
            idx_parts.append(i)
            sim_parts.append(v)
        if not idx_parts:
            k = min(m, len(sources))
            return np.zeros((0, k), np.int64), np.zeros((0, k))
        return np.concatenate(idx_parts), np.concatenate(sim_parts)
    if method != "ann":
        raise ValueError(f"unknown retrieval method {method!r}")
    if index is None:
        index = build_index(sources, params, rng_seed, similarity)
    k = min(m, len(index))
    idx = np.zeros((len(queries), k), np.int64)
    sims = np.zeros((len(queries), k))
    for r, q in enumerate(queries):
        i, v = index.query(q, k)
        idx[r, : len(i)], sims[r, : len(i)] = i, v
    return idx, sims


def assign_neighbors(target_ids: np.ndarray, target_vecs: np.ndarray, target_present: np.ndarray | None,
                     source_ids: np.ndarray, source_vecs: np.ndarray, m: int, **kwargs) -> NeighborAssignment:
    """Retrieve for every target; returned source indices are mapped through ``source_ids``."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    present = np.ones(len(target_ids), bool) if target_present is None else np.asarray(target_present, bool)
    k = min(m, len(source_ids))
    src = np.zeros((len(target_ids), k), np.int64)
    sims = np.zeros((len(target_ids), k))
    lengths = np.zeros(len(target_ids), np.int64)
    rows = np.flatnonzero(present)
    if len(rows):
        i, v = retrieve(target_vecs[rows], source_vecs, m, **kwargs)
        src[rows] = np.asarray(source_ids)[i]
        sims[rows] = v
        lengths[rows] = k
    return NeighborAssignment(target_ids, src, sims, lengths)


@dataclass
class GeneratedEmbeddings:
    """Synthesised rows ``E_T[r]`` for ``assignment.targets[r]`` with their weights."""

    E_T: np.ndarray
    assignment: NeighborAssignment
    weights: np.ndarray
    status: list[str] = field(default_factory=list)

    def save(self, path: str | Path, provenance_path: str | Path | None = None) -> None:
        checkpoint.save(path, {"E_T": self.E_T}, {"kind": "generated", "targets": self.assignment.targets.tolist()})
        if provenance_path is not None:
            with open(provenance_path, "w", encoding="utf-8") as fh:
                a = self.assignment
                for r, t in enumerate(a.targets.tolist()):
                    n = a.lengths[r]
                    pairs = ",".join(f"{s}:{w:.9g}" for s, w in zip(a.sources[r, :n].tolist(),
                                                                   self.weights[r, :n].tolist()))
                    fh.write(f"{t}\t{self.status[r]}\t{pairs}\n")


def load_generated(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """``(targets, E_T)`` from a saved generation."""
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "generated":
        raise checkpoint.CheckpointError(f"{path} does not hold generated embeddings")
    return np.array(meta["targets"], dtype=np.int64), tensors["E_T"]


def aggregation_weights(sims: np.ndarray, eps: float = FALLBACK_EPS) -> tuple[np.ndarray, bool]:
    """Clamp at zero and normalise; uniform when the clamped mass is <= ``eps``."""
    clamped = np.maximum(np.asarray(sims, dtype=np.float64), 0.0)
    total = clamped.sum()
    if total <= eps:
        return np.full(len(clamped), 1.0 / len(clamped)), True
    return clamped / total, False


def generate_embeddings(assignment: NeighborAssignment, E_source: np.ndarray, eps: float = FALLBACK_EPS
                        ) -> GeneratedEmbeddings:
    """Each target row becomes the similarity-weighted mean of its neighbours' rows.

    Rows with no neighbours (no vector) become zero rows marked ``cold-fallback``.
    """
    E_source = np.asarray(E_source, dtype=np.float64)
    out = np.zeros((len(assignment), E_source.shape[1]))
    weights = np.zeros(assignment.sims.shape)
    status = []
    fallbacks = 0
    cold = 0
    for r in range(len(assignment)):
        n = assignment.lengths[r]
        if n == 0:
            status.append("cold-fallback")
            cold += 1
            continue
        src = assignment.sources[r, :n]
        if src.min() < 0 or src.max() >= len(E_source):
            raise IndexError(f"neighbor index out of range for target {assignment.targets[r]}")
        w, fell_back = aggregation_weights(assignment.sims[r, :n], eps)
        fallbacks += fell_back
        weights[r, :n] = w
        out[r] = w @ E_source[src]
        status.append("uniform" if fell_back else "weighted")
    if fallbacks:
        logger.warning("generate_embeddings: %d rows had no positive similarity; used uniform weights", fallbacks)
    if cold:
        logger.warning("generate_embeddings: %d targets lack a vector; zero rows used", cold)
    return GeneratedEmbeddings(out, assignment, weights, status)


def apply_generated(model, generated: GeneratedEmbeddings) -> None:
    """Write generated rows into ``model.E`` at their target indices."""
    with torch.no_grad():
        idx = torch.as_tensor(generated.assignment.targets)
        model.E[idx] = torch.as_tensor(generated.E_T, dtype=model.E.dtype)


def generate_inner_domain(item_domains: np.ndarray, cold_items: np.ndarray, E: np.ndarray,
                          adapted_vectors: np.ndarray, present: np.ndarray, m: int = 10,
                          similarity: str = COSINE) -> GeneratedEmbeddings:
    """Synthesise rows for ``cold_items`` from warm items of the same domain.

    ``adapted_vectors`` and ``present`` are indexed by global item id; ``E`` is
    the trained table whose warm rows act as sources.
    """
    cold_items = np.asarray(cold_items, dtype=np.int64)
    if len(cold_items) == 0:
        empty = NeighborAssignment(cold_items, np.zeros((0, 0), np.int64), np.zeros((0, 0)), np.zeros(0, np.int64))
        return GeneratedEmbeddings(np.zeros((0, E.shape[1])), empty, np.zeros((0, 0)), [])
    is_cold = np.zeros(len(item_domains), bool)
    is_cold[cold_items] = True
    parts = []
    for dom in dict.fromkeys(item_domains[cold_items].tolist()):
        targets = cold_items[item_domains[cold_items] == dom]
        warm = np.flatnonzero((item_domains == dom) & ~is_cold & present)
        if len(warm) == 0:
            raise ValueError(f"domain {dom!r} has no warm items with vectors")
        parts.append(assign_neighbors(targets, adapted_vectors[targets], present[targets], warm,
                                      adapted_vectors[warm], m, similarity=similarity))
    width = max(p.sources.shape[1] for p in parts)

    def pad(a, fill=0):
        return np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=fill)

    assignment = NeighborAssignment(
        np.concatenate([p.targets for p in parts]), np.concatenate([pad(p.sources) for p in parts]),
        np.concatenate([pad(p.sims) for p in parts]), np.concatenate([p.lengths for p in parts]))
    order = np.argsort(assignment.targets, kind="stable")
    assignment = NeighborAssignment(assignment.targets[order], assignment.sources[order],
                                    assignment.sims[order], assignment.lengths[order])
    return generate_embeddings(assignment, E)
