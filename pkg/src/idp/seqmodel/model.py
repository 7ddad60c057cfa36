"""ID-based sequential recommender with pluggable sequence encoders."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .._nn import dropout, gelu

logger = logging.getLogger(__name__)

ATTENTION = "causal-attention"
RECURRENT = "gated-recurrent"
BACKENDS = (ATTENTION, RECURRENT)


@dataclass
class SeqHyper:
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    backend: str = ATTENTION
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 20
    layer_norm_eps: float = 1e-8

    def validate(self) -> None:
        if self.dim <= 0 or self.num_layers <= 0 or self.num_heads <= 0 or self.max_len <= 0:
            raise ValueError("dim, num_layers, num_heads and max_len must be positive")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.batch_size <= 0 or self.lr < 0 or self.epochs < 0 or self.patience <= 0:
            raise ValueError("invalid optimisation settings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeqHyper":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, self.eps)


class AttentionBlock(nn.Module):
    """Post-norm transformer block with causal multi-head attention.

    The per-head projections W_i^Q, W_i^K, W_i^V are stored side by side as the
    column blocks of one d x d matrix each.
    """

    def __init__(self, dim: int, heads: int, drop: float, eps: float):
        super().__init__()
        self.dim, self.heads, self.drop = dim, heads, drop
        self.W_Q = nn.Parameter(torch.empty(dim, dim))
        self.W_K = nn.Parameter(torch.empty(dim, dim))
        self.W_V = nn.Parameter(torch.empty(dim, dim))
        self.W_O = nn.Parameter(torch.empty(dim, dim))
        self.ln1 = LayerNorm(dim, eps)
        self.W_1 = nn.Parameter(torch.empty(dim, dim))
        self.b_1 = nn.Parameter(torch.zeros(dim))
        self.W_2 = nn.Parameter(torch.empty(dim, dim))
        self.b_2 = nn.Parameter(torch.zeros(dim))
        self.ln2 = LayerNorm(dim, eps)
        for w in (self.W_Q, self.W_K, self.W_V, self.W_O, self.W_1, self.W_2):
            nn.init.xavier_uniform_(w)

    def attention_weights(self, h: torch.Tensor) -> torch.Tensor:
        """Causal softmax weights, shape (B, heads, T, T)."""
        b, t, _ = h.shape
        dk = self.dim // self.heads
        q = (h @ self.W_Q).view(b, t, self.heads, dk).transpose(1, 2)
        k = (h @ self.W_K).view(b, t, self.heads, dk).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dk)
        future = torch.triu(torch.ones(t, t, dtype=torch.bool, device=h.device), diagonal=1)
        logits = logits.masked_fill(future, float("-inf"))
        return torch.softmax(logits, dim=-1)

    def multi_head(self, h: torch.Tensor) -> torch.Tensor:
        b, t, _ = h.shape
        dk = self.dim // self.heads
        w = self.attention_weights(h)
        v = (h @ self.W_V).view(b, t, self.heads, dk).transpose(1, 2)
        heads = (w @ v).transpose(1, 2).reshape(b, t, self.dim)
        return heads @ self.W_O

    def ffn(self, a: torch.Tensor) -> torch.Tensor:
        return gelu(a @ self.W_1 + self.b_1) @ self.W_2 + self.b_2

    def forward(self, h, generator=None):
        train = self.training
        a = self.ln1(h + dropout(self.multi_head(h), self.drop, generator, train))
        return self.ln2(a + dropout(self.ffn(a), self.drop, generator, train))


class AttentionEncoder(nn.Module):
    kind = ATTENTION

    def __init__(self, hyper: SeqHyper):
        super().__init__()
        self.layers = nn.ModuleList(
            AttentionBlock(hyper.dim, hyper.num_heads, hyper.dropout, hyper.layer_norm_eps)
            for _ in range(hyper.num_layers)
        )

    def forward(self, h0, generator=None):
        h = h0
        for layer in self.layers:
            h = layer(h, generator)
        return h


class GRUEncoder(nn.Module):
    """Update/reset-gate recurrence; the hidden state at step i is the output at i."""

    kind = RECURRENT

    def __init__(self, hyper: SeqHyper):
        super().__init__()
        d = hyper.dim
        self.drop = hyper.dropout
        self.W_z = nn.Parameter(torch.empty(2 * d, d))
        self.W_r = nn.Parameter(torch.empty(2 * d, d))
        self.W_h = nn.Parameter(torch.empty(2 * d, d))
        self.b_z = nn.Parameter(torch.zeros(d))
        self.b_r = nn.Parameter(torch.zeros(d))
        self.b_h = nn.Parameter(torch.zeros(d))
        for w in (self.W_z, self.W_r, self.W_h):
            nn.init.xavier_uniform_(w)

    def forward(self, h0, generator=None):
        x = dropout(h0, self.drop, generator, self.training)
        b, t, d = x.shape
        state = x.new_zeros(b, d)
        outs = []
        for i in range(t):
            xi = x[:, i]
            xs = torch.cat([xi, state], dim=-1)
            z = torch.sigmoid(xs @ self.W_z + self.b_z)
            r = torch.sigmoid(xs @ self.W_r + self.b_r)
            cand = torch.tanh(torch.cat([xi, r * state], dim=-1) @ self.W_h + self.b_h)
            state = (1 - z) * state + z * cand
            outs.append(state)
        return torch.stack(outs, dim=1)


def make_encoder(hyper: SeqHyper) -> nn.Module:
    return AttentionEncoder(hyper) if hyper.backend == ATTENTION else GRUEncoder(hyper)


class TextProjection(nn.Module):
    """Maps raw item text vectors to the ID embedding space.

    ``kind='pca'`` is a frozen projection ``components @ (t - mean)``;
    ``kind='learned'`` is a trainable affine map.
    """

    def __init__(self, in_dim: int, out_dim: int, kind: str = "learned"):
        super().__init__()
        self.kind = kind
        if kind == "pca":
            self.register_buffer("components", torch.zeros(out_dim, in_dim))
            self.register_buffer("mean", torch.zeros(in_dim))
        elif kind == "learned":
            self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
            self.bias = nn.Parameter(torch.zeros(out_dim))
            nn.init.xavier_uniform_(self.weight)
        else:
            raise ValueError(f"unknown text projection {kind!r}")

    def forward(self, t):
        if self.kind == "pca":
            return (t - self.mean) @ self.components.T
        return t @ self.weight + self.bias


class SeqRecModel(nn.Module):
    """Item table ``E``, position table ``P`` (attention backend only) and an encoder.

    When a text table is attached, each item's representation is
    ``E[v] + proj(text[v])``; items flagged as lacking text use ``E[v]`` alone.
    """

    def __init__(self, num_items: int, hyper: SeqHyper):
        super().__init__()
        hyper.validate()
        self.hyper = hyper
        std = 1.0 / math.sqrt(hyper.dim)
        self.E = nn.Parameter(torch.randn(num_items, hyper.dim) * std)
        if hyper.backend == ATTENTION:
            self.P = nn.Parameter(torch.randn(hyper.max_len, hyper.dim) * std)
        else:
            self.P = None
        self.encoder = make_encoder(hyper)
        self.text_proj: TextProjection | None = None
        self.register_buffer("text", None)
        self.register_buffer("text_mask", None)

    @property
    def num_items(self) -> int:
        return self.E.shape[0]

    def attach_text(self, vectors: np.ndarray | torch.Tensor, present: np.ndarray | None,
                    projection: TextProjection) -> None:
        vec = torch.as_tensor(np.asarray(vectors), dtype=self.E.dtype)
        if vec.shape[0] != self.num_items:
            raise ValueError(f"text table has {vec.shape[0]} rows, model has {self.num_items} items")
        mask = torch.ones(self.num_items, dtype=self.E.dtype) if present is None else \
            torch.as_tensor(np.asarray(present), dtype=self.E.dtype)
        self.text = vec
        self.text_mask = mask
        self.text_proj = projection.to(self.E.dtype)

    def item_vectors(self, idx: torch.Tensor | None = None) -> torch.Tensor:
        e = self.E if idx is None else self.E[idx]
        if self.text_proj is None:
            return e
        t = self.text if idx is None else self.text[idx]
        m = self.text_mask if idx is None else self.text_mask[idx]
        return e + self.text_proj(t) * m.unsqueeze(-1)

    def embed(self, seqs: torch.Tensor) -> torch.Tensor:
        h = self.item_vectors(seqs)
        if self.P is not None:
            h = h + self.P[: seqs.shape[1]]
        return h

    def forward(self, seqs: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Hidden states for right-padded index batches, shape (B, T, d)."""
        return self.encoder(self.embed(seqs), generator)

    def embedding_tensors(self) -> dict[str, torch.Tensor]:
        out = {"E": self.E}
        if self.P is not None:
            out["P"] = self.P
        return out

    def encoder_tensors(self) -> dict[str, torch.Tensor]:
        return {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Right-pad (left-aligned) index sequences, keeping the most recent ``max_len`` items.

    Returns ``(batch, lengths, truncated_count)``. Padding slots hold index 0;
    with causal encoders they never influence real positions.
    """
    truncated = 0
    rows = []
    for s in seqs:
        if len(s) == 0:
            raise ValueError("empty sequence")
        if len(s) > max_len:
            truncated += 1
            s = s[-max_len:]
        rows.append(list(s))
    t = max(len(r) for r in rows)
    batch = torch.zeros(len(rows), t, dtype=torch.long)
    for i, r in enumerate(rows):
        batch[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    lengths = torch.as_tensor([len(r) for r in rows], dtype=torch.long)
    return batch, lengths, truncated


def user_representations(model: SeqRecModel, seqs: Sequence[Sequence[int]], batch_size: int = 1024
                         ) -> torch.Tensor:
    """Last-position encoder outputs for each sequence, dropout off."""
    was_training = model.training
    model.eval()
    outs = []
    truncated = 0
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            for s in chunk:
                if len(s) and max(s) >= model.num_items:
                    raise IndexError(f"item index {max(s)} out of range for {model.num_items} items")
            batch, lengths, tr = pad_batch(chunk, model.hyper.max_len)
            truncated += tr
            h = model(batch)
            outs.append(h[torch.arange(len(chunk)), lengths - 1])
    model.train(was_training)
    if truncated:
        logger.info("truncated %d sequences to the most recent %d items", truncated, model.hyper.max_len)
    if not outs:
        return torch.zeros(0, model.hyper.dim, dtype=model.E.dtype)
    return torch.cat(outs)


def forward(model: SeqRecModel, seq: Sequence[int]) -> torch.Tensor:
    """User representation ``e_u`` for one sequence (eval mode)."""
    return user_representations(model, [list(seq)])[0]


def score(e_u: torch.Tensor, v, E: torch.Tensor) -> torch.Tensor:
    return E[v] @ e_u


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``-log sigmoid(pos - neg)`` computed as a stable log-sigmoid."""
    losses = -F.logsigmoid(pos_scores - neg_scores)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    return losses
