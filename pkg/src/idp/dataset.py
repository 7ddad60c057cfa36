"""Interaction logs, item vectors, filtering, domain merging and leave-one-out splits."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_NEGATIVES = 99


class DataError(ValueError):
    """Raised for malformed input files or degenerate datasets."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int
    domain: str

    def __post_init__(self):
        if not (self.user and self.item and self.domain):
            raise DataError("interaction fields must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass
class InteractionStore:
    """Per-user chronological item sequences over a dense global item index.

    Users and items are keyed by ``(domain, raw_id)`` so identical raw strings
    from different domains never collide.
    """

    domains: list[str]
    users: dict[tuple[str, str], int]
    items: dict[tuple[str, str], int]
    sequences: list[list[int]]
    timestamps: list[list[int]] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def item_keys(self) -> list[tuple[str, str]]:
        keys: list[tuple[str, str]] = [None] * len(self.items)  # type: ignore[list-item]
        for key, idx in self.items.items():
            keys[idx] = key
        return keys

    def user_keys(self) -> list[tuple[str, str]]:
        keys: list[tuple[str, str]] = [None] * len(self.users)  # type: ignore[list-item]
        for key, idx in self.users.items():
            keys[idx] = key
        return keys

    def item_domains(self) -> np.ndarray:
        """Domain tag per global item index."""
        return np.array([d for d, _ in self.item_keys()], dtype=object)

    def domain_items(self, domain: str) -> np.ndarray:
        return np.array(sorted(i for (d, _), i in self.items.items() if d == domain), dtype=np.int64)

    def counts(self) -> dict[str, tuple[int, int]]:
        """``domain -> (num_users, num_items)`` plus a ``"*"`` global entry."""
        out = {}
        for dom in self.domains:
            nu = sum(1 for d, _ in self.users if d == dom)
            ni = sum(1 for d, _ in self.items if d == dom)
            out[dom] = (nu, ni)
        out["*"] = (self.num_users, self.num_items)
        return out

    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def to_interactions(self) -> list[Interaction]:
        ukeys, ikeys = self.user_keys(), self.item_keys()
        out = []
        for u, seq in enumerate(self.sequences):
            dom, uname = ukeys[u]
            ts = self.timestamps[u] if self.timestamps else range(len(seq))
            for v, t in zip(seq, ts):
                out.append(Interaction(uname, ikeys[v][1], int(t), dom))
        return out


def _build_store(records: Iterable[Interaction]) -> InteractionStore:
    # records arrive in file order; a stable sort on timestamp keeps ties in that order
    per_user: dict[tuple[str, str], list[tuple[int, tuple[str, str]]]] = {}
    domains: list[str] = []
    seen_domains = set()
    for rec in records:
        if rec.domain not in seen_domains:
            seen_domains.add(rec.domain)
            domains.append(rec.domain)
        per_user.setdefault((rec.domain, rec.user), []).append((rec.timestamp, (rec.domain, rec.item)))
    if not per_user:
        raise DataError("no interactions")

    users: dict[tuple[str, str], int] = {}
    items: dict[tuple[str, str], int] = {}
    sequences: list[list[int]] = []
    timestamps: list[list[int]] = []
    # items are numbered domain by domain, in first-appearance order, so each
    # domain occupies one contiguous block of the global index space
    ordered_users = sorted(per_user, key=lambda k: domains.index(k[0]))
    for dom in domains:
        for ukey in ordered_users:
            if ukey[0] != dom:
                continue
            for _, ikey in sorted(per_user[ukey], key=lambda r: r[0]):
                if ikey not in items:
                    items[ikey] = len(items)
    for ukey in ordered_users:
        events = sorted(per_user[ukey], key=lambda r: r[0])
        users[ukey] = len(users)
        sequences.append([items[ikey] for _, ikey in events])
        timestamps.append([t for t, _ in events])
    return InteractionStore(domains, users, items, sequences, timestamps)


def ingest(path: str | Path, format: str = "tsv") -> InteractionStore:
    """Read ``user<TAB>item<TAB>timestamp<TAB>domain`` lines into a store."""
    if format != "tsv":
        raise DataError(f"unsupported format {format!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            user, item, ts, domain = parts
            try:
                t = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            try:
                records.append(Interaction(user, item, t, domain))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise DataError(f"{path}: empty interaction file")
    return _build_store(records)


def write_interactions(store: InteractionStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in store.to_interactions():
            fh.write(f"{rec.user}\t{rec.item}\t{rec.timestamp}\t{rec.domain}\n")


def from_sequences(sequences: dict[str, Sequence[str]], domain: str = "D") -> InteractionStore:
    """Build a store from ``user -> [item, ...]`` already in chronological order."""
    recs = [Interaction(u, it, t, domain) for u, seq in sequences.items() for t, it in enumerate(seq)]
    return _build_store(recs)


def filter_min_interactions(store: InteractionStore, k: int) -> InteractionStore:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ukeys, ikeys = store.user_keys(), store.item_keys()
    seqs = {u: list(zip(s, store.timestamps[u] if store.timestamps else range(len(s))))
            for u, s in enumerate(store.sequences)}
    while True:
        item_count = Counter(v for s in seqs.values() for v, _ in s)
        bad_items = {v for v, c in item_count.items() if c < k}
        new = {}
        for u, s in seqs.items():
            kept = [e for e in s if e[0] not in bad_items]
            if len(kept) >= k:
                new[u] = kept
        changed = len(new) != len(seqs) or any(len(new[u]) != len(seqs[u]) for u in new)
        seqs = new
        if not changed:
            break
    if not seqs:
        raise DataError("dataset exhausted by filtering")
    recs = []
    for u in sorted(seqs):
        dom, uname = ukeys[u]
        for v, t in seqs[u]:
            recs.append(Interaction(uname, ikeys[v][1], int(t), ikeys[v][0]))
    out = _build_store(recs)
    # keep the original domain order even if a domain lost everything
    out.domains = [d for d in store.domains if d in out.domains]
    return out


def select_domains(store: InteractionStore, domains: Sequence[str]) -> InteractionStore:
    """Sub-store with only the named domains, re-indexed densely."""
    missing = [d for d in domains if d not in store.domains]
    if missing:
        raise DataError(f"unknown domain(s) {missing}; store has {store.domains}")
    keep = set(domains)
    return _build_store(r for r in store.to_interactions() if r.domain in keep)


def remove_items(store: InteractionStore, item_keys: Iterable[tuple[str, str]]) -> InteractionStore:
    """Drop every interaction with the given ``(domain, item)`` keys and re-index."""
    drop = set(item_keys)
    return _build_store(r for r in store.to_interactions() if (r.domain, r.item) not in drop)


def merge_domains(stores: Sequence[InteractionStore]) -> InteractionStore:
    """Concatenate stores into one disjoint index space with no user/item alignment."""
    if not stores:
        raise ValueError("need at least one store")
    users: dict[tuple[str, str], int] = {}
    items: dict[tuple[str, str], int] = {}
    sequences, timestamps, domains = [], [], []
    for si, st in enumerate(stores):
        offset = len(items)
        ikeys = st.item_keys()
        taken = {k[0] for k in items}
        # a domain tag reused across stores is renamed so the stores stay distinct
        rename = {d: (d if d not in taken else f"{d}#{si}") for d in st.domains}
        for idx, (d, raw) in enumerate(ikeys):
            items[(rename[d], raw)] = offset + idx
        for (d, raw), u in sorted(st.users.items(), key=lambda kv: kv[1]):
            users[(rename[d], raw)] = len(users)
            sequences.append([offset + v for v in st.sequences[u]])
            timestamps.append(list(st.timestamps[u]) if st.timestamps else list(range(len(st.sequences[u]))))
        domains.extend(rename[d] for d in st.domains)
    return InteractionStore(domains, users, items, sequences, timestamps)


@dataclass
class LeaveOneOutSplit:
    """Train prefixes, validation/test targets and 99 sampled negatives per user.

    ``users`` lists the store user indices kept (sequences of length >= 3).
    """

    users: np.ndarray
    train: list[list[int]]
    valid: np.ndarray
    test: np.ndarray
    negatives: np.ndarray
    num_items: int

    def __len__(self) -> int:
        return len(self.users)

    def valid_inputs(self) -> list[list[int]]:
        return self.train

    def test_inputs(self) -> list[list[int]]:
        return [t + [int(v)] for t, v in zip(self.train, self.valid)]

    def subset(self, mask: np.ndarray) -> "LeaveOneOutSplit":
        idx = np.flatnonzero(mask)
        return LeaveOneOutSplit(
            self.users[idx], [self.train[i] for i in idx], self.valid[idx], self.test[idx],
            self.negatives[idx], self.num_items,
        )


def sample_negatives(rng: np.random.Generator, num_items: int, exclude: set[int], n: int) -> np.ndarray:
    """``n`` distinct items drawn uniformly from the catalog minus ``exclude``."""
    pool_size = num_items - len(exclude)
    if pool_size < n:
        raise DataError(f"only {pool_size} candidate negatives, need {n}")
    if pool_size < 4 * n:
        pool = np.setdiff1d(np.arange(num_items), np.fromiter(exclude, dtype=np.int64))
        return rng.choice(pool, size=n, replace=False)
    out: list[int] = []
    taken = set(exclude)
    while len(out) < n:
        for v in rng.integers(0, num_items, size=2 * (n - len(out))):
            v = int(v)
            if v not in taken:
                taken.add(v)
                out.append(v)
                if len(out) == n:
                    break
    return np.array(out, dtype=np.int64)


def split_leave_one_out(store: InteractionStore, rng_seed: int, num_negatives: int = NUM_NEGATIVES,
                        candidate_items: np.ndarray | None = None) -> LeaveOneOutSplit:
    """Last item is the test target, second-to-last the validation target.

    Negatives come from ``candidate_items`` (default: the whole catalog) minus
    everything the user touched.
    """
    rng = np.random.default_rng(rng_seed)
    users, train, valid, test, negs = [], [], [], [], []
    skipped = 0
    for u, seq in enumerate(store.sequences):
        if len(seq) < 3:
            skipped += 1
            continue
        users.append(u)
        train.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
        if candidate_items is None:
            negs.append(sample_negatives(rng, store.num_items, set(seq), num_negatives))
        else:
            pool = np.setdiff1d(candidate_items, np.asarray(seq))
            if len(pool) < num_negatives:
                raise DataError(f"only {len(pool)} candidate negatives, need {num_negatives}")
            negs.append(rng.choice(pool, size=num_negatives, replace=False))
    if skipped:
        logger.warning("split_leave_one_out: excluded %d users with fewer than 3 interactions", skipped)
    if not users:
        raise DataError("no user has at least 3 interactions")
    return LeaveOneOutSplit(
        np.array(users, dtype=np.int64), train, np.array(valid, dtype=np.int64),
        np.array(test, dtype=np.int64), np.stack(negs).astype(np.int64), store.num_items,
    )


# --- item vectors -----------------------------------------------------------

def read_vectors(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``item<TAB>v1,v2,...`` lines; all rows must share one dimension."""
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected item<TAB>values")
            try:
                vec = np.array([float(x) for x in parts[1].split(",")], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric vector value") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite vector value")
            out[parts[0]] = vec
    if not out:
        raise DataError(f"{path}: empty vector file")
    return out


def write_vectors(vectors: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]], path: str | Path) -> None:
    rows = vectors.items() if isinstance(vectors, dict) else vectors
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in rows:
            fh.write(key + "\t" + ",".join(repr(float(x)) for x in vec) + "\n")


def align_vectors(store: InteractionStore, per_domain: dict[str, dict[str, np.ndarray]]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Stack vectors in global item order.

    Returns ``(matrix, present)``; rows of items without a vector are zero and
    flagged False in ``present``.
    """
    keys = store.item_keys()
    dim = None
    for vecs in per_domain.values():
        for v in vecs.values():
            dim = len(v)
            break
        if dim is not None:
            break
    if dim is None:
        raise DataError("no vectors supplied")
    mat = np.zeros((len(keys), dim))
    present = np.zeros(len(keys), dtype=bool)
    for idx, (dom, raw) in enumerate(keys):
        vec = per_domain.get(dom, {}).get(raw)
        if vec is not None:
            if len(vec) != dim:
                raise DataError(f"vector for {dom}/{raw} has dimension {len(vec)} != {dim}")
            mat[idx] = vec
            present[idx] = True
    return mat, present
