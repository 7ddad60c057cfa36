"""Cross-domain ID matcher: an adapter over frozen item text vectors tuned with
a dropout twin-view contrastive loss and a behavior-positive contrastive loss.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from ._nn import dropout, gelu, make_generator
from .checkpoint import CheckpointError
from .similarity import COSINE, DOT, pairwise, top_k

logger = logging.getLogger(__name__)

TEXT, IMAGE, FUSED = "text", "image", "fused"


@dataclass
class TextVectorStore:
    """Frozen per-item vectors in global item order (row ``i`` = item ``i``)."""

    vectors: np.ndarray
    modality: str = TEXT

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def fused_store(text: np.ndarray, image: np.ndarray, image_present: np.ndarray | None = None) -> TextVectorStore:
    """Concatenate text and image vectors; items without an image use zeros for it."""
    text = np.asarray(text, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if image_present is not None:
        missing = int(np.sum(~image_present))
        if missing:
            logger.warning("fuse: %d items lack an image vector; using text only", missing)
        image = np.where(image_present[:, None], image, 0.0)
    return TextVectorStore(np.concatenate([text, image], axis=1), FUSED)


@dataclass
class CdimHyper:
    out_dim: int = 64
    dropout: float = 0.1
    tau: float = 0.05
    k: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    patience: int = 20
    holdout: float = 0.1
    similarity: str = COSINE
    text_weight: float = 1.0
    behavior_weight: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k < 1 or self.out_dim < 1 or self.batch_size < 2:
            raise ValueError("k, out_dim must be >= 1 and batch_size >= 2")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.holdout < 1.0:
            raise ValueError("dropout and holdout must be in [0, 1)")
        if self.similarity not in (COSINE, DOT):
            raise ValueError(f"unknown similarity {self.similarity!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CdimHyper":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Adapter(nn.Module):
    """Two affine layers ``in_dim -> out_dim -> out_dim`` with GELU and dropout.

    Dropout is applied to the input and to the hidden layer, so two train-mode
    passes over the same vector give two distinct views.
    """

    def __init__(self, in_dim: int, out_dim: int = 64, drop: float = 0.1, tau: float = 0.05):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.drop = drop
        self.W1 = nn.Parameter(torch.empty(in_dim, out_dim))
        self.b1 = nn.Parameter(torch.zeros(out_dim))
        self.W2 = nn.Parameter(torch.empty(out_dim, out_dim))
        self.b2 = nn.Parameter(torch.zeros(out_dim))
        self.register_buffer("tau", torch.tensor(float(tau)))
        nn.init.xavier_uniform_(self.W1)
        nn.init.xavier_uniform_(self.W2)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None, train: bool = False):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dimension {x.shape[-1]} != adapter input {self.in_dim}")
        x = dropout(x, self.drop, generator, train)
        h = dropout(gelu(x @ self.W1 + self.b1), self.drop, generator, train)
        return h @ self.W2 + self.b2


def encode(adapter: Adapter, raw, mode: str = "infer", rng_seed: int | None = None) -> np.ndarray:
    """Adapted vector(s) for one ``(D,)`` or a batch ``(N, D)`` of raw vectors."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', not {mode!r}")
    x = torch.as_tensor(np.asarray(raw), dtype=adapter.W1.dtype)
    if not torch.all(torch.isfinite(x)):
        raise ValueError("raw vector is not finite")
    gen = make_generator(rng_seed or 0) if mode == "train" else None
    with torch.no_grad():
        out = adapter(x, gen, train=mode == "train")
    return out.numpy()


def fuse_multimodal(text_vec, image_vec, fusion: Adapter, mode: str = "infer", rng_seed: int | None = None,
                    ) -> np.ndarray:
    """Fused representation of one item: the fusion MLP over ``[text; image]``.

    A missing image (None) falls back to text only.
    """
    text_vec = np.asarray(text_vec, dtype=np.float64)
    if image_vec is None:
        logger.warning("fuse: missing image vector, using text only")
        image_vec = np.zeros(fusion.in_dim - len(text_vec))
    return encode(fusion, np.concatenate([text_vec, np.asarray(image_vec, dtype=np.float64)]), mode, rng_seed)


# --- behavior positives -------------------------------------------------------

@dataclass
class BehaviorPositives:
    """``items[i]`` lists the ``k`` most similar other items of item ``i``."""

    items: np.ndarray
    scores: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def k(self) -> int:
        return self.items.shape[1]

    def __len__(self) -> int:
        return self.items.shape[0]


def mine_behavior_positives(E: np.ndarray, k: int, similarity: str = COSINE, chunk: int = 1024
                            ) -> BehaviorPositives:
    """Top-``k`` neighbours of every item by ID-embedding similarity, itself excluded."""
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}]")
    idx_rows, val_rows = [], []
    for start in range(0, n, chunk):
        sims = pairwise(E[start:start + chunk], E, similarity)
        sims[np.arange(sims.shape[0]), np.arange(start, start + sims.shape[0])] = -np.inf
        idx, vals = top_k(sims, k)
        idx_rows.append(idx)
        val_rows.append(vals)
    return BehaviorPositives(np.concatenate(idx_rows), np.concatenate(val_rows))


# --- losses -------------------------------------------------------------------

def _sim(a: torch.Tensor, b: torch.Tensor, kind: str) -> torch.Tensor:
    """Similarity along the last axis with broadcasting."""
    if kind == COSINE:
        a = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        b = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return (a * b).sum(-1)


def _in_batch_negatives(anchors: torch.Tensor, kind: str) -> torch.Tensor:
    """(N, N) anchor-vs-anchor similarities with the diagonal removed -> (N, N-1)."""
    n = anchors.shape[0]
    sims = _sim(anchors.unsqueeze(1), anchors.unsqueeze(0), kind)
    off = ~torch.eye(n, dtype=torch.bool)
    return sims[off].view(n, n - 1)


def info_nce(pos: torch.Tensor, neg: torch.Tensor, tau) -> torch.Tensor:
    """``-log(exp(pos/tau) / (exp(pos/tau) + sum exp(neg/tau)))`` per row; ``neg`` is (..., M)."""
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1) / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def text_contrastive_loss(view1: torch.Tensor, view2: torch.Tensor, tau, similarity: str = COSINE) -> torch.Tensor:
    """Twin-view loss: ``view2[i]`` is the positive of ``view1[i]``, the other
    items' ``view1`` rows are its negatives. Mean over the batch.
    """
    if view1.shape[0] < 2:
        raise ValueError("text contrastive loss needs a batch of at least 2 items")
    pos = _sim(view1, view2, similarity)
    neg = _in_batch_negatives(view1, similarity)
    return info_nce(pos, neg, tau).mean()


def behavior_contrastive_loss(anchors: torch.Tensor, positives: torch.Tensor, tau,
                              similarity: str = COSINE) -> torch.Tensor:
    """``positives`` is (N, k, d); each (anchor, positive) pair is one InfoNCE term
    against the other anchors in the batch. Averaged over positives and batch.
    """
    if anchors.shape[0] < 2:
        raise ValueError("behavior contrastive loss needs a batch of at least 2 items")
    pos = _sim(anchors.unsqueeze(1), positives, similarity)            # (N, k)
    neg = _in_batch_negatives(anchors, similarity)                      # (N, N-1)
    neg = neg.unsqueeze(1).expand(-1, positives.shape[1], -1)           # (N, k, N-1)
    return info_nce(pos, neg, tau).mean()


def batch_losses(adapter: Adapter, vectors: torch.Tensor, batch: np.ndarray, positives: BehaviorPositives,
                 gen: torch.Generator | None, similarity: str = COSINE) -> tuple[torch.Tensor, torch.Tensor]:
    """Text and behavior losses for one batch of item indices, dropout on."""
    raw = vectors[batch]
    view1 = adapter(raw, gen, train=True)
    view2 = adapter(raw, gen, train=True)
    pos_idx = torch.as_tensor(positives.items[batch])
    pos_vecs = adapter(vectors[pos_idx], gen, train=True)
    l_text = text_contrastive_loss(view1, view2, adapter.tau, similarity)
    l_beh = behavior_contrastive_loss(view1, pos_vecs, adapter.tau, similarity)
    return l_text, l_beh


def text_loss_for(adapter: Adapter, raw: torch.Tensor, rng_seed: int, similarity: str = COSINE) -> torch.Tensor:
    gen = make_generator(rng_seed)
    return text_contrastive_loss(adapter(raw, gen, True), adapter(raw, gen, True), adapter.tau, similarity)


def behavior_loss_for(adapter: Adapter, vectors: torch.Tensor, batch: np.ndarray, positives: BehaviorPositives,
                      rng_seed: int, similarity: str = COSINE) -> torch.Tensor:
    for i in batch:
        for j in positives.items[i]:
            if not 0 <= j < vectors.shape[0]:
                raise KeyError(f"positive item {j} of item {i} has no vector")
    gen = make_generator(rng_seed)
    anchors = adapter(vectors[batch], gen, True)
    pos = adapter(vectors[torch.as_tensor(positives.items[batch])], gen, True)
    return behavior_contrastive_loss(anchors, pos, adapter.tau, similarity)


# --- tuning -------------------------------------------------------------------

@dataclass
class CdimHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


class AdapterDiverged(RuntimeError):
    def __init__(self, msg: str, adapter: Adapter):
        super().__init__(msg)
        self.adapter = adapter


def _batches(items: np.ndarray, size: int) -> list[np.ndarray]:
    out = [items[s:s + size] for s in range(0, len(items), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return [b for b in out if len(b) >= 2]


def _eval_loss(adapter, vectors, items, positives, hyper, seed) -> float:
    gen = make_generator(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for b in _batches(items, hyper.batch_size):
            lt, lb = batch_losses(adapter, vectors, b, positives, gen, hyper.similarity)
            total += (hyper.text_weight * lt + hyper.behavior_weight * lb).item() * len(b)
            count += len(b)
    return total / max(count, 1)


def tune_cdim(store: TextVectorStore, positives: BehaviorPositives, hyper: CdimHyper, rng_seed: int,
              dtype: torch.dtype = torch.float32) -> tuple[Adapter, CdimHistory]:
    """Train an adapter on the summed text and behavior losses.

    ``store`` rows and ``positives`` rows are indexed by the same pre-training
    item ids. Early stopping watches the combined loss on a held-out item split.
    """
    hyper.validate()
    n = len(store)
    if len(positives) != n:
        raise ValueError(f"positives cover {len(positives)} items, store has {n}")
    rng = np.random.default_rng(rng_seed)
    torch.manual_seed(rng_seed)
    adapter = Adapter(store.dim, hyper.out_dim, hyper.dropout, hyper.tau).to(dtype)
    vectors = torch.as_tensor(store.vectors, dtype=dtype)
    perm = rng.permutation(n)
    n_hold = int(round(n * hyper.holdout)) if hyper.holdout > 0 else 0
    held, train_items = np.sort(perm[:n_hold]), perm[n_hold:]
    gen = make_generator(rng_seed + 1)
    history = CdimHistory()
    opt = torch.optim.Adam(adapter.parameters(), lr=hyper.lr)
    best = copy.deepcopy(adapter.state_dict())
    best_val = _eval_loss(adapter, vectors, held, positives, hyper, rng_seed + 2) if n_hold >= 2 else float("inf")
    history.val_loss.append(best_val)
    stale = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(train_items)
        total, count = 0.0, 0
        for b in _batches(order, hyper.batch_size):
            lt, lb = batch_losses(adapter, vectors, b, positives, gen, hyper.similarity)
            loss = hyper.text_weight * lt + hyper.behavior_weight * lb
            if not torch.isfinite(loss):
                adapter.load_state_dict(best)
                raise AdapterDiverged(f"non-finite CDIM loss at epoch {epoch}", adapter)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            count += len(b)
        history.train_loss.append(total / max(count, 1))
        if n_hold >= 2:
            val = _eval_loss(adapter, vectors, held, positives, hyper, rng_seed + 2)
            history.val_loss.append(val)
            if val < best_val:
                best_val, history.best_epoch = val, epoch
                best = copy.deepcopy(adapter.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= hyper.patience:
                    logger.info("CDIM early stop at epoch %d (best %d)", epoch, history.best_epoch)
                    break
        else:
            best = copy.deepcopy(adapter.state_dict())
            history.best_epoch = epoch
    adapter.load_state_dict(best)
    adapter.eval()
    return adapter, history


def adapted(adapter: Adapter, vectors: np.ndarray) -> np.ndarray:
    """Inference-mode adapted vectors for a whole table."""
    return encode(adapter, vectors, "infer")


def save_adapter(adapter: Adapter, path: str | Path, modality: str = TEXT, extra_meta: dict | None = None) -> None:
    meta = {"kind": "adapter", "in_dim": adapter.in_dim, "out_dim": adapter.out_dim, "dropout": adapter.drop,
            "modality": modality}
    if extra_meta:
        meta["extra"] = extra_meta
    checkpoint.save(path, dict(adapter.state_dict()), meta)


def load_adapter(path: str | Path) -> Adapter:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "adapter":
        raise CheckpointError(f"{path} does not hold an adapter")
    dtype = torch.float64 if tensors["W1"].dtype == np.float64 else torch.float32
    adapter = Adapter(meta["in_dim"], meta["out_dim"], meta["dropout"], float(tensors["tau"])).to(dtype)
    with torch.no_grad():
        for name, t in adapter.state_dict().items():
            if tuple(tensors[name].shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {name}")
            t.copy_(torch.as_tensor(tensors[name], dtype=t.dtype))
    adapter.eval()
    return adapter
