"""Sampled leave-one-out ranking: HR@K, NDCG@K and MRR."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import LeaveOneOutSplit

KS = (1, 3, 5)


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """1-based rank of column 0 (the target) in each row of candidate scores.

    Ties are pessimistic: every negative scoring at least as high as the target
    is placed above it.
    """
    scores = np.asarray(scores)
    return 1 + np.sum(scores[:, 1:] >= scores[:, :1], axis=1)


@dataclass
class RankedCandidates:
    candidates: np.ndarray
    scores: np.ndarray
    ranks: np.ndarray


def score_candidates(model, split: LeaveOneOutSplit, which: str = "test", batch_size: int = 1024) -> RankedCandidates:
    from .seqmodel import user_representations

    if which == "test":
        inputs, targets = split.test_inputs(), split.test
    elif which == "valid":
        inputs, targets = split.valid_inputs(), split.valid
    else:
        raise ValueError(f"which must be 'test' or 'valid', not {which!r}")
    cands = np.concatenate([targets[:, None], split.negatives], axis=1)
    if cands.size and cands.max() >= model.num_items:
        raise IndexError(f"candidate item {cands.max()} has no embedding row ({model.num_items} items)")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        users = user_representations(model, inputs, batch_size)
        items = model.item_vectors()
        c = torch.as_tensor(cands)
        scores = torch.einsum("ud,ucd->uc", users, items[c]).numpy()
    model.train(was_training)
    return RankedCandidates(cands, scores, ranks_from_scores(scores))


def rank_users(model, split: LeaveOneOutSplit, which: str = "test") -> np.ndarray:
    return score_candidates(model, split, which).ranks


def _check(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks to aggregate")
    return r


def hit_rate(ranks, k: int) -> float:
    r = _check(ranks)
    return float(np.mean(r <= k))


def ndcg(ranks, k: int) -> float:
    r = _check(ranks)
    gains = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(np.mean(gains))


def mrr(ranks) -> float:
    r = _check(ranks)
    return float(np.mean(1.0 / r))


@dataclass
class EvalReport:
    metrics: dict[str, float]
    ranks: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks: Sequence[int], metadata: dict | None = None, ks=KS) -> "EvalReport":
        r = _check(ranks).astype(np.int64)
        metrics: dict[str, float] = {}
        for k in ks:
            metrics[f"HR@{k}"] = hit_rate(r, k)
        for k in ks:
            metrics[f"NDCG@{k}"] = ndcg(r, k)
        metrics["MRR"] = mrr(r)
        meta = {str(k): str(v) for k, v in (metadata or {}).items()}
        meta["num_users"] = str(len(r))
        return cls(metrics, r, meta)


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite metric value {x}")
    return f"{x:.6f}"


def format_report(report: EvalReport, format: str = "tsv") -> str:
    if not report.metrics or len(report.ranks) == 0:
        raise ValueError("refusing to write an empty report")
    if format == "tsv":
        lines = [f"# {k}={v}" for k, v in sorted(report.metadata.items())]
        lines += [f"{name}\t{_fmt(v)}" for name, v in report.metrics.items()]
        return "\n".join(lines) + "\n"
    if format == "structured-text":
        doc = {"metadata": dict(sorted(report.metadata.items())),
               "metrics": {name: _fmt(v) for name, v in report.metrics.items()}}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def emit_report(report: EvalReport, path: str | Path, format: str = "tsv") -> Path:
    path = Path(path)
    text = format_report(report, format)
    path.write_text(text, encoding="utf-8")
    return path


def parse_report(text: str) -> tuple[dict[str, float], dict[str, str]]:
    """Inverse of :func:`format_report` for either format."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
        return {k: float(v) for k, v in doc["metrics"].items()}, dict(doc["metadata"])
    metrics, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            name, value = line.split("\t")
            metrics[name] = float(value)
    return metrics, meta


def write_ranks(report: EvalReport, users: Sequence[int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, r in zip(users, report.ranks):
            fh.write(f"{int(u)}\t{int(r)}\n")
