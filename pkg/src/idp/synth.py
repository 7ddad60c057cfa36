"""Synthetic multi-domain corpora with a known cross-domain ground truth.

Items in every domain belong to one of ``num_clusters`` latent clusters that are
shared across domains (IDs are not). Users walk a Markov chain over clusters and
pick an item of the current cluster by a Zipf-like popularity. An item's text
vector is its cluster centroid plus isotropic Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DataError, Interaction, InteractionStore, _build_store, write_interactions, write_vectors


@dataclass(frozen=True)
class SynthSpec:
    num_clusters: int = 8
    items_per_domain: int = 500
    users_per_domain: int = 2000
    seq_len: int = 20
    # weight of the identity in the cluster transition matrix; inf -> users never switch
    concentration: float = 2.0
    noise_scale: float = 1.0
    vector_dim: int = 128
    popularity_exponent: float = 0.8
    domains: tuple[str, ...] = ("A", "B")

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise DataError("num_clusters must be >= 1")
        if self.items_per_domain < 1 or self.users_per_domain < 1:
            raise DataError("need at least one item and one user per domain")
        if self.items_per_domain < self.num_clusters:
            raise DataError("fewer items than clusters")
        if self.seq_len < 1 or self.vector_dim < 1 or not self.domains:
            raise DataError("degenerate synthetic corpus settings")
        if self.concentration < 0 or self.noise_scale < 0:
            raise DataError("concentration and noise_scale must be >= 0")


S1 = SynthSpec()


@dataclass
class SynthCorpus:
    spec: SynthSpec
    store: InteractionStore
    transition: np.ndarray
    centroids: np.ndarray
    # (domain, raw item id) -> cluster / text vector
    clusters: dict[tuple[str, str], int] = field(default_factory=dict)
    vectors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def item_clusters(self, store: InteractionStore | None = None) -> np.ndarray:
        store = store or self.store
        return np.array([self.clusters[k] for k in store.item_keys()], dtype=np.int64)

    def expected_stay_frequency(self) -> float:
        """Exact expected fraction of consecutive pairs that share a cluster."""
        g = self.spec.num_clusters
        dist = np.full(g, 1.0 / g)
        diag = np.diag(self.transition)
        total = 0.0
        steps = self.spec.seq_len - 1
        for _ in range(steps):
            total += float(dist @ diag)
            dist = dist @ self.transition
        return total / max(steps, 1)

    def write(self, outdir: str | Path) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {"interactions": outdir / "interactions.tsv"}
        write_interactions(self.store, paths["interactions"])
        for dom in self.spec.domains:
            p = outdir / f"vectors_{dom}.tsv"
            write_vectors(self.vectors[dom], p)
            paths[f"vectors_{dom}"] = p
            c = outdir / f"clusters_{dom}.tsv"
            with open(c, "w", encoding="utf-8") as fh:
                for (d, raw), g in self.clusters.items():
                    if d == dom:
                        fh.write(f"{raw}\t{g}\n")
            paths[f"clusters_{dom}"] = c
        return paths


def _transition_matrix(rng: np.random.Generator, g: int, concentration: float) -> np.ndarray:
    off = rng.dirichlet(np.ones(g), size=g)
    if np.isinf(concentration):
        return np.eye(g)
    return (concentration * np.eye(g) + off) / (concentration + 1.0)


def synthesize_corpus(spec: SynthSpec = S1, rng_seed: int = 42) -> SynthCorpus:
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    g = spec.num_clusters
    centroids = rng.standard_normal((g, spec.vector_dim))
    trans = _transition_matrix(rng, g, spec.concentration)
    cum = np.cumsum(trans, axis=1)

    records: list[Interaction] = []
    clusters: dict[tuple[str, str], int] = {}
    vectors: dict[str, dict[str, np.ndarray]] = {}
    for dom in spec.domains:
        n = spec.items_per_domain
        labels = rng.permutation(np.arange(n) % g)
        members = [np.flatnonzero(labels == c) for c in range(g)]
        pop = []
        for mem in members:
            w = 1.0 / (1.0 + rng.permutation(len(mem))) ** spec.popularity_exponent
            pop.append(np.cumsum(w / w.sum()))
        noise = rng.standard_normal((n, spec.vector_dim)) * spec.noise_scale
        vecs = centroids[labels] + noise
        vectors[dom] = {f"i{j}": vecs[j] for j in range(n)}
        for j in range(n):
            clusters[(dom, f"i{j}")] = int(labels[j])

        for u in range(spec.users_per_domain):
            c = int(rng.integers(g))
            for t in range(spec.seq_len):
                if t > 0:
                    c = min(int(np.searchsorted(cum[c], rng.random(), side="right")), g - 1)
                mem = members[c]
                j = mem[min(int(np.searchsorted(pop[c], rng.random(), side="right")), len(mem) - 1)]
                records.append(Interaction(f"u{u}", f"i{j}", t, dom))
    store = _build_store(records)
    return SynthCorpus(spec, store, trans, centroids, clusters, vectors)
