"""Persist recommenders in the IDPCKPT1 container, whole or by parameter group."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .. import checkpoint
from ..checkpoint import CheckpointError
from .model import SeqHyper, SeqRecModel, TextProjection

GROUPS = ("embeddings", "encoder")


def model_tensors(model: SeqRecModel) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def _meta(model: SeqRecModel) -> dict:
    meta = {"kind": "seqmodel", "num_items": model.num_items, "hyper": model.hyper.to_dict()}
    if model.text_proj is not None:
        meta["text_projection"] = model.text_proj.kind
        meta["text_dim"] = int(model.text.shape[1])
    return meta


def save_model(model: SeqRecModel, path: str | Path, extra_meta: dict | None = None) -> None:
    meta = _meta(model)
    if extra_meta:
        meta["extra"] = extra_meta
    checkpoint.save(path, model_tensors(model), meta)


def load_model(path: str | Path) -> SeqRecModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "seqmodel":
        raise CheckpointError(f"{path} does not hold a sequential model")
    hyper = SeqHyper.from_dict(meta["hyper"])
    dtype = torch.float64 if tensors["E"].dtype == np.float64 else torch.float32
    model = SeqRecModel(meta["num_items"], hyper).to(dtype)
    if "text_projection" in meta:
        proj = TextProjection(meta["text_dim"], hyper.dim, meta["text_projection"])
        model.attach_text(tensors["text"], tensors["text_mask"], proj)
    _assign(model, tensors, strict=True)
    model.eval()
    return model


def _assign(model: SeqRecModel, tensors: dict[str, np.ndarray], strict: bool, names: Iterable[str] | None = None):
    own = model.state_dict()
    names = list(own) if names is None else list(names)
    if strict:
        missing = [n for n in own if n not in tensors]
        extra = [n for n in tensors if n not in own]
        if missing or extra:
            raise CheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name in names:
            if name not in tensors:
                raise CheckpointError(f"checkpoint has no tensor {name}")
            src = tensors[name]
            if tuple(src.shape) != tuple(own[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(src.shape)} vs model {tuple(own[name].shape)}")
            own[name].copy_(torch.as_tensor(src, dtype=own[name].dtype))


def load_partial(model: SeqRecModel, path: str | Path, groups: Iterable[str]) -> SeqRecModel:
    """Overwrite the chosen parameter groups of ``model`` from a checkpoint.

    ``embeddings`` covers E (and P when both sides have one); ``encoder`` covers
    every encoder tensor and requires the same backend.
    """
    tensors, meta = checkpoint.load(path)
    groups = list(groups)
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown parameter group {g!r}")
    names: list[str] = []
    if "embeddings" in groups:
        names.append("E")
        if model.P is not None and "P" in tensors:
            names.append("P")
    if "encoder" in groups:
        backend = meta.get("hyper", {}).get("backend")
        if backend != model.hyper.backend:
            raise CheckpointError(f"encoder backend mismatch: checkpoint {backend!r} vs model {model.hyper.backend!r}")
        names.extend(n for n in model.state_dict() if n.startswith("encoder."))
    _assign(model, tensors, strict=False, names=names)
    return model
