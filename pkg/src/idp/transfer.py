"""Downstream deployment of generated ID embeddings and the PCA text pathway."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .checkpoint import CheckpointError
from .dataset import LeaveOneOutSplit
from .seqmodel import SeqHyper, SeqRecModel, TextProjection, TrainHistory, train

logger = logging.getLogger(__name__)

ZERO_SHOT = "zero-shot"
FINETUNE_ALL = "finetune-all"
RETRAIN_ENCODER = "retrain-encoder"
MODES = (ZERO_SHOT, FINETUNE_ALL, RETRAIN_ENCODER)


@dataclass(frozen=True)
class DeploymentMode:
    mode: str = ZERO_SHOT
    use_text: bool = False
    text_projection: str = "pca"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown deployment mode {self.mode!r}; expected one of {MODES}")
        if self.text_projection not in ("pca", "learned"):
            raise ValueError(f"unknown text projection {self.text_projection!r}")


# --- PCA ----------------------------------------------------------------------

@dataclass
class PcaModel:
    """``components`` rows are orthonormal principal axes, largest variance first.

    Eigenvalues are those of the sample covariance with the ``n - 1`` divisor, so
    the total squared reconstruction error of the fitting data with ``q`` kept
    components equals ``(n - 1)`` times the sum of the dropped eigenvalues.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    all_eigenvalues: np.ndarray | None = None

    @property
    def q(self) -> int:
        return self.components.shape[0]

    def projection(self) -> TextProjection:
        proj = TextProjection(self.components.shape[1], self.q, "pca").double()
        with torch.no_grad():
            proj.components.copy_(torch.as_tensor(self.components))
            proj.mean.copy_(torch.as_tensor(self.mean))
        return proj

    def save(self, path: str | Path) -> None:
        tensors = {"mean": self.mean, "components": self.components, "eigenvalues": self.eigenvalues}
        checkpoint.save(path, tensors, {"kind": "pca", "q": self.q})


def load_pca(path: str | Path) -> PcaModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "pca":
        raise CheckpointError(f"{path} does not hold a PCA model")
    return PcaModel(tensors["mean"], tensors["components"], tensors["eigenvalues"])


def fit_pca(vectors: np.ndarray, q: int) -> PcaModel:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    n, d = x.shape
    if not 1 <= q <= d:
        raise ValueError(f"q={q} must be in [1, {d}]")
    if n < q + 1:
        raise ValueError(f"need at least q+1={q + 1} vectors, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude coordinate of each axis is positive
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(d)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    return PcaModel(mean, vecs[:, :q].T.copy(), vals[:q].copy(), vals)


def project(pca: PcaModel, vector: np.ndarray) -> np.ndarray:
    """``components @ (v - mean)`` for one vector or row-wise for a matrix."""
    v = np.asarray(vector, dtype=np.float64)
    return (v - pca.mean) @ pca.components.T


def reconstruct(pca: PcaModel, coords: np.ndarray) -> np.ndarray:
    return np.asarray(coords) @ pca.components + pca.mean


# --- input composition ----------------------------------------------------------

def compose_input(e_id, t, projection) -> np.ndarray:
    """``e_id + projection(t)``; rows whose ``t`` is None are returned as ``e_id``.

    ``projection`` is a :class:`PcaModel`, a :class:`TextProjection` or any callable
    on numpy arrays.
    """
    e_id = np.asarray(e_id, dtype=np.float64)
    if t is None:
        logger.info("compose_input: 1 item lacks a text vector; using its ID embedding only")
        return e_id.copy()
    if e_id.ndim == 2 and isinstance(t, (list, tuple)):
        missing = [i for i, row in enumerate(t) if row is None]
        if missing:
            logger.info("compose_input: %d items lack a text vector; using their ID embedding only", len(missing))
        out = e_id.copy()
        for i, row in enumerate(t):
            if row is not None:
                out[i] = e_id[i] + _apply(projection, np.asarray(row, dtype=np.float64))
        return out
    p = _apply(projection, np.asarray(t, dtype=np.float64))
    if p.shape[-1] != e_id.shape[-1]:
        raise ValueError(f"projection output dim {p.shape[-1]} != embedding dim {e_id.shape[-1]}")
    return e_id + p


def _apply(projection, t: np.ndarray) -> np.ndarray:
    if isinstance(projection, PcaModel):
        return project(projection, t)
    if isinstance(projection, torch.nn.Module):
        with torch.no_grad():
            w = next(iter(projection.buffers()), None)
            if w is None:
                w = next(iter(projection.parameters()))
            return projection(torch.as_tensor(t, dtype=w.dtype)).double().numpy()
    return np.asarray(projection(t), dtype=np.float64)


# --- deployment ---------------------------------------------------------------

def random_embeddings(num_items: int, dim: int, rng_seed: int) -> np.ndarray:
    """Embeddings drawn like a fresh model's item table (normal, std 1/sqrt(dim))."""
    g = torch.Generator().manual_seed(rng_seed)
    return (torch.randn(num_items, dim, generator=g, dtype=torch.float64) / np.sqrt(dim)).numpy()


def _downstream_model(E_T: np.ndarray, hyper: SeqHyper, dtype: torch.dtype) -> SeqRecModel:
    model = SeqRecModel(E_T.shape[0], hyper).to(dtype)
    with torch.no_grad():
        model.E.copy_(torch.as_tensor(E_T, dtype=dtype))
    return model


def _attach_text(model: SeqRecModel, mode: DeploymentMode, text: np.ndarray | None,
                 present: np.ndarray | None, pca: PcaModel | None) -> None:
    if not mode.use_text:
        return
    if text is None:
        raise ValueError("use_text requires item text vectors")
    if mode.text_projection == "pca":
        if pca is None:
            raise ValueError("PCA projection requested but no PCA model given")
        if pca.q != model.hyper.dim:
            raise ValueError(f"PCA keeps {pca.q} components, embeddings have dim {model.hyper.dim}")
        proj = pca.projection()
    else:
        proj = TextProjection(text.shape[1], model.hyper.dim, "learned")
    if present is not None and not np.all(present):
        logger.info("deploy: %d items lack a text vector; using their ID embedding only", int(np.sum(~present)))
    model.attach_text(text, present, proj)


def deploy(mode: DeploymentMode | str, pretrained: SeqRecModel, E_T: np.ndarray, split: LeaveOneOutSplit | None,
           hyper: SeqHyper | None = None, rng_seed: int = 0, text: np.ndarray | None = None,
           present: np.ndarray | None = None, pca: PcaModel | None = None, epochs: int | None = None
           ) -> tuple[SeqRecModel, TrainHistory | None]:
    """Build the downstream model for ``split`` from generated rows ``E_T``.

    zero-shot copies the pre-trained encoder and position table and uses ``E_T``
    as the item table with no update. finetune-all starts from the same model and
    trains everything on downstream BPR. retrain-encoder keeps ``E_T`` as the
    trainable initialisation of the item table but builds a fresh encoder and
    position table from ``hyper`` (any backend).
    """
    if isinstance(mode, str):
        mode = DeploymentMode(mode)
    E_T = np.asarray(E_T)
    if E_T.ndim != 2 or E_T.shape[1] != pretrained.hyper.dim:
        raise ValueError(f"E_T must be (num_items, {pretrained.hyper.dim}), got {E_T.shape}")
    if split is not None and E_T.shape[0] < split.num_items:
        raise ValueError(f"E_T has {E_T.shape[0]} rows but the downstream catalog has {split.num_items} items")
    if not np.all(np.isfinite(E_T)):
        raise ValueError("E_T contains non-finite rows")
    dtype = pretrained.E.dtype
    torch.manual_seed(rng_seed)
    if mode.mode == RETRAIN_ENCODER:
        h = copy.deepcopy(hyper or pretrained.hyper)
        if h.dim != pretrained.hyper.dim:
            raise ValueError("retrain-encoder must keep the embedding dimension")
        model = _downstream_model(E_T, h, dtype)
    else:
        model = _downstream_model(E_T, copy.deepcopy(pretrained.hyper), dtype)
        with torch.no_grad():
            if pretrained.P is not None:
                model.P.copy_(pretrained.P)
            model.encoder.load_state_dict(pretrained.encoder.state_dict())
    _attach_text(model, mode, text, present, pca)
    if mode.mode == ZERO_SHOT:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model, None
    if split is None:
        raise ValueError(f"{mode.mode} needs a downstream split to train on")
    train_hyper = hyper or pretrained.hyper
    if mode.mode == FINETUNE_ALL and hyper is not None:
        train_hyper = copy.deepcopy(pretrained.hyper)
        for name in ("batch_size", "lr", "epochs", "patience"):
            setattr(train_hyper, name, getattr(hyper, name))
    history = train(model, split.train, split, rng_seed, train_hyper, epochs=epochs)
    return model, history
