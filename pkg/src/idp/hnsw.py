"""Hierarchical navigable small-world graph for approximate top-m retrieval.

Vectors are compared by cosine (stored L2-normalised) or raw inner product;
internally the search minimises ``-similarity``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import checkpoint
from .similarity import COSINE, DOT, normalize

logger = logging.getLogger(__name__)


# --- compiled kernels ---------------------------------------------------------
# Heaps are parallel (key, id) arrays ordered lexicographically, so equal
# distances resolve by node index and results are reproducible.

@njit(cache=True)
def _dot(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


@njit(cache=True)
def _less(d1, n1, d2, n2):
    return d1 < d2 or (d1 == d2 and n1 < n2)


@njit(cache=True)
def _push(kd, kn, size, d, n):
    i = size
    kd[i] = d
    kn[i] = n
    while i > 0:
        p = (i - 1) // 2
        if _less(kd[i], kn[i], kd[p], kn[p]):
            kd[i], kd[p] = kd[p], kd[i]
            kn[i], kn[p] = kn[p], kn[i]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _pop(kd, kn, size):
    size -= 1
    kd[0] = kd[size]
    kn[0] = kn[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        c = left
        if left + 1 < size and _less(kd[left + 1], kn[left + 1], kd[left], kn[left]):
            c = left + 1
        if _less(kd[c], kn[c], kd[i], kn[i]):
            kd[i], kd[c] = kd[c], kd[i]
            kn[i], kn[c] = kn[c], kn[i]
            i = c
        else:
            break
    return size


@njit(cache=True)
def _search_kernel(data, nbrs, cnt, q, entries, ef, visit, stamp):
    """Beam search on one layer; returns (distances, nodes) ascending."""
    cap = data.shape[0] + entries.shape[0]
    cd = np.empty(cap)
    cn = np.empty(cap, np.int64)
    bd = np.empty(ef + entries.shape[0] + 1)
    bn = np.empty(ef + entries.shape[0] + 1, np.int64)
    cs = 0
    bs = 0
    for e in entries:
        visit[e] = stamp
        d = -_dot(data[e], q)
        cs = _push(cd, cn, cs, d, e)
        # worst-first heap via negated keys
        bs = _push(bd, bn, bs, -d, -e)
        if bs > ef:
            bs = _pop(bd, bn, bs)
    while cs > 0:
        d = cd[0]
        n = cn[0]
        cs = _pop(cd, cn, cs)
        if bs >= ef and d > -bd[0]:
            break
        for j in range(cnt[n]):
            m = nbrs[n, j]
            if visit[m] == stamp:
                continue
            visit[m] = stamp
            dm = -_dot(data[m], q)
            if bs < ef or _less(dm, m, -bd[0], -bn[0]):
                cs = _push(cd, cn, cs, dm, m)
                bs = _push(bd, bn, bs, -dm, -m)
                if bs > ef:
                    bs = _pop(bd, bn, bs)
    out_d = -bd[:bs]
    out_n = -bn[:bs]
    order = np.argsort(out_n, kind="mergesort")
    out_d = out_d[order]
    out_n = out_n[order]
    order = np.argsort(out_d, kind="mergesort")
    return out_d[order], out_n[order]


@njit(cache=True)
def _select_kernel(data, base_sims, cands, k):
    """Diversity heuristic: keep a candidate only if it is closer to the base than
    to every kept neighbour; top up with the nearest pruned ones. ``cands`` is
    sorted by distance and the result keeps that order."""
    n = cands.shape[0]
    if n <= k:
        return cands.copy()
    keep = np.zeros(n, np.bool_)
    nk = 0
    for i in range(n):
        ok = True
        for r in range(i):
            if keep[r] and _dot(data[cands[i]], data[cands[r]]) >= base_sims[i]:
                ok = False
                break
        if ok:
            keep[i] = True
            nk += 1
            if nk == k:
                break
    i = 0
    while nk < k:
        if not keep[i]:
            keep[i] = True
            nk += 1
        i += 1
    return cands[keep]


@njit(cache=True)
def _connect_kernel(data, nbrs, cnt, node, neigh, limit):
    for t in range(neigh.shape[0]):
        n = neigh[t]
        c = cnt[n]
        nbrs[n, c] = node
        c += 1
        cnt[n] = c
        if c > limit:
            links = nbrs[n, :c].copy()
            sims = np.empty(c)
            for j in range(c):
                sims[j] = _dot(data[links[j]], data[n])
            order = np.argsort(links, kind="mergesort")
            links = links[order]
            sims = sims[order]
            order = np.argsort(-sims, kind="mergesort")
            kept = _select_kernel(data, sims[order], links[order], limit)
            nbrs[n, : kept.shape[0]] = kept
            cnt[n] = kept.shape[0]


class IndexNotFrozen(RuntimeError):
    pass


@dataclass(frozen=True)
class BuildParams:
    max_degree: int = 16
    ef_construction: int = 200
    ef_search: int = 200


class AnnIndex:
    """Layered proximity graph. Insert with :meth:`add`, then :meth:`freeze` before querying."""

    def __init__(self, dim: int, params: BuildParams = BuildParams(), similarity: str = COSINE, rng_seed: int = 0):
        if similarity not in (COSINE, DOT):
            raise ValueError(f"unknown similarity {similarity!r}")
        if params.max_degree < 2:
            raise ValueError("max_degree must be >= 2")
        self.dim = dim
        self.params = params
        self.similarity = similarity
        self._rng = np.random.default_rng(rng_seed)
        self._level_mult = 1.0 / math.log(params.max_degree)
        self._data = np.zeros((0, dim))
        self._size = 0
        # per level: neighbour table (capacity x max_degree+1) and fill counts
        self._nbrs: list[np.ndarray] = []
        self._cnt: list[np.ndarray] = []
        self._levels = np.zeros(0, dtype=np.int64)
        self._visit = np.zeros(0, dtype=np.int64)
        self._stamp = 0
        self._entry: int | None = None
        self.frozen = False
        self.repaired_edges = 0

    def __len__(self) -> int:
        return self._size

    @property
    def vectors(self) -> np.ndarray:
        return self._data[: self._size]

    def neighbours(self, node: int, level: int = 0) -> np.ndarray:
        return self._nbrs[level][node, : self._cnt[level][node]]

    def _max_degree(self, level: int) -> int:
        return 2 * self.params.max_degree if level == 0 else self.params.max_degree

    def _prep(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return normalize(x) if self.similarity == COSINE else x

    def _search_layer(self, q: np.ndarray, entries: list[int], ef: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``ef`` ``(distances, nodes)`` nearest to ``q`` on ``level``, ascending."""
        self._stamp += 1
        return _search_kernel(self._data, self._nbrs[level], self._cnt[level], q,
                              np.asarray(entries, dtype=np.int64), ef, self._visit, self._stamp)

    def _grow(self, need: int) -> None:
        cap = max(need, 2 * len(self._data), 16)
        data = np.zeros((cap, self.dim))
        data[: self._size] = self._data[: self._size]
        self._data = data
        for lv in range(len(self._nbrs)):
            table = np.zeros((cap, self._nbrs[lv].shape[1]), dtype=np.int64)
            table[: self._size] = self._nbrs[lv][: self._size]
            self._nbrs[lv] = table
            self._cnt[lv] = np.concatenate([self._cnt[lv][: self._size], np.zeros(cap - self._size, np.int64)])
        self._levels = np.concatenate([self._levels[: self._size], np.zeros(cap - self._size, np.int64)])
        self._visit = np.zeros(cap, dtype=np.int64)
        self._stamp = 0

    def add(self, vectors: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("index is frozen")
        vectors = self._prep(np.atleast_2d(vectors))
        if vectors.shape[1] != self.dim:
            raise ValueError(f"vector dimension {vectors.shape[1]} != {self.dim}")
        if self._size + len(vectors) > len(self._data):
            self._grow(self._size + len(vectors))
        for v in vectors:
            self._insert(v)

    def _set_links(self, level: int, node: int, links: np.ndarray) -> None:
        self._nbrs[level][node, : len(links)] = links
        self._cnt[level][node] = len(links)

    def _insert(self, v: np.ndarray) -> None:
        node = self._size
        self._data[node] = v
        self._size += 1
        level = int(-math.log(1.0 - self._rng.random()) * self._level_mult)
        self._levels[node] = level
        cap = len(self._data)
        while len(self._nbrs) <= level:
            lv = len(self._nbrs)
            self._nbrs.append(np.zeros((cap, self._max_degree(lv) + 1), dtype=np.int64))
            self._cnt.append(np.zeros(cap, dtype=np.int64))
        if self._entry is None:
            self._entry = node
            return
        top = int(self._levels[self._entry])
        ep = [self._entry]
        for lc in range(top, level, -1):
            ep = [int(self._search_layer(v, ep, 1, lc)[1][0])]
        for lc in range(min(top, level), -1, -1):
            dists, cands = self._search_layer(v, ep, self.params.ef_construction, lc)
            neigh = _select_kernel(self._data, -dists, cands, self.params.max_degree)
            self._set_links(lc, node, neigh)
            _connect_kernel(self._data, self._nbrs[lc], self._cnt[lc], node, neigh, self._max_degree(lc))
            ep = cands
        if level > top:
            self._entry = node

    def freeze(self) -> "AnnIndex":
        """Make layer 0 reachable from the entry point, then forbid further inserts."""
        if self._size and self._entry is not None:
            self._repair_layer0()
        self.frozen = True
        return self

    def _reachable(self) -> np.ndarray:
        seen = np.zeros(self._size, dtype=bool)
        seen[self._entry] = True
        queue = deque([self._entry])
        while queue:
            n = queue.popleft()
            for m in self.neighbours(n).tolist():
                if not seen[m]:
                    seen[m] = True
                    queue.append(m)
        return seen

    def _repair_layer0(self) -> None:
        seen = self._reachable()
        while not seen.all():
            orphan = int(np.flatnonzero(~seen)[0])
            reach = np.flatnonzero(seen)
            s = self._data[reach] @ self._data[orphan]
            anchor = int(reach[int(np.argmax(s))])
            for a, b in ((anchor, orphan), (orphan, anchor)):
                self._append_overflow(a, b)
            self.repaired_edges += 1
            # everything reachable from the orphan is now reachable too
            queue = deque([orphan])
            seen[orphan] = True
            while queue:
                n = queue.popleft()
                for m in self.neighbours(n).tolist():
                    if not seen[m]:
                        seen[m] = True
                        queue.append(m)
        if self.repaired_edges:
            logger.info("hnsw: added %d edges to connect layer 0", self.repaired_edges)

    def _append_overflow(self, node: int, target: int) -> None:
        # repair edges may exceed the degree bound, so widen the table if needed
        table, cnt = self._nbrs[0], self._cnt[0]
        if cnt[node] >= table.shape[1]:
            table = np.concatenate([table, np.zeros((len(table), 1), dtype=np.int64)], axis=1)
            self._nbrs[0] = table
        table[node, cnt[node]] = target
        cnt[node] += 1

    def is_connected(self) -> bool:
        return bool(self._reachable().all()) if self._size else True

    def query(self, q: np.ndarray, m: int, ef: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Approximate top-``m`` ``(indices, similarities)``, best first."""
        if not self.frozen:
            raise IndexNotFrozen("freeze() the index before querying")
        if self._size == 0:
            raise ValueError("empty index")
        ef = max(ef or self.params.ef_search, m)
        q = self._prep(q)
        ep = [self._entry]
        for lc in range(int(self._levels[self._entry]), 0, -1):
            ep = [int(self._search_layer(q, ep, 1, lc)[1][0])]
        _, idx = self._search_layer(q, ep, ef, 0)
        idx = idx[:m]
        return idx, self._data[idx] @ q


def save_index(index: AnnIndex, path) -> None:
    """Write a frozen index; integer tables are stored as exact float64 values."""
    if not index.frozen:
        raise IndexNotFrozen("only frozen indexes can be saved")
    n = index._size
    tensors = {"data": index._data[:n], "levels": index._levels[:n].astype(np.float64)}
    for lv in range(len(index._nbrs)):
        tensors[f"nbrs{lv}"] = index._nbrs[lv][:n].astype(np.float64)
        tensors[f"cnt{lv}"] = index._cnt[lv][:n].astype(np.float64)
    meta = {"kind": "ann-index", "dim": index.dim, "similarity": index.similarity,
            "params": dataclasses.asdict(index.params), "entry": index._entry,
            "num_levels": len(index._nbrs), "repaired_edges": index.repaired_edges}
    checkpoint.save(path, tensors, meta)


def load_index(path) -> AnnIndex:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "ann-index":
        raise checkpoint.CheckpointError(f"{path} does not hold an ANN index")
    index = AnnIndex(meta["dim"], BuildParams(**meta["params"]), meta["similarity"])
    data = tensors["data"]
    index._data = data.copy()
    index._size = len(data)
    index._levels = tensors["levels"].astype(np.int64)
    index._nbrs = [tensors[f"nbrs{lv}"].astype(np.int64) for lv in range(meta["num_levels"])]
    index._cnt = [tensors[f"cnt{lv}"].astype(np.int64) for lv in range(meta["num_levels"])]
    index._visit = np.zeros(len(data), dtype=np.int64)
    index._entry = meta["entry"]
    index.repaired_edges = meta["repaired_edges"]
    index.frozen = True
    return index


def build_index(sources: np.ndarray, params: BuildParams = BuildParams(), rng_seed: int = 0,
                similarity: str = COSINE) -> AnnIndex:
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    index = AnnIndex(sources.shape[1], params, similarity, rng_seed)
    index.add(sources)
    return index.freeze()


def retrieve_ann(index: AnnIndex, query: np.ndarray, m: int, ef: int | None = None):
    return index.query(query, m, ef)
