"""BPR training with Adam, one uniform negative per positive, early stopping on NDCG@5."""
from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .._nn import make_generator
from ..dataset import InteractionStore, LeaveOneOutSplit, split_leave_one_out
from .model import SeqHyper, SeqRecModel, bpr_loss, pad_batch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``state`` holds the last finite parameters."""

    def __init__(self, msg: str, state: dict[str, torch.Tensor]):
        super().__init__(msg)
        self.state = state


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val_ndcg5: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("-inf")

    def epochs_to_reach(self, threshold: float) -> int | None:
        """First epoch whose validation NDCG@5 reached ``threshold`` (0 = before training)."""
        for i, v in enumerate(self.val_ndcg5):
            if v >= threshold:
                return i
        return None


def training_pairs(sequences: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Sequences usable for next-item training (length >= 2), truncated to ``max_len + 1``."""
    out = []
    for s in sequences:
        if len(s) >= 2:
            out.append(list(s[-(max_len + 1):]))
    return out


def sample_uniform_negatives(rng: np.random.Generator, positives: np.ndarray, num_items: int) -> np.ndarray:
    """One item per positive, uniform over the catalog minus that positive."""
    r = rng.integers(0, num_items - 1, size=positives.shape)
    return r + (r >= positives)


def _batch_loss(model: SeqRecModel, chunk: list[list[int]], rng: np.random.Generator,
                gen: torch.Generator | None) -> torch.Tensor:
    inputs = [s[:-1] for s in chunk]
    targets = [s[1:] for s in chunk]
    batch, lengths, _ = pad_batch(inputs, model.hyper.max_len)
    tgt, _, _ = pad_batch(targets, model.hyper.max_len)
    mask = torch.arange(batch.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
    neg = torch.as_tensor(sample_uniform_negatives(rng, tgt.numpy(), model.num_items))
    h = model(batch, gen)[mask]
    items_pos = model.item_vectors(tgt[mask])
    items_neg = model.item_vectors(neg[mask])
    return bpr_loss((h * items_pos).sum(-1), (h * items_neg).sum(-1))


def evaluate_ndcg5(model: SeqRecModel, split: LeaveOneOutSplit, which: str = "valid") -> float:
    from ..evaluation import rank_users, ndcg

    ranks = rank_users(model, split, which=which)
    return ndcg(ranks, 5)


def train(model: SeqRecModel, sequences: Sequence[Sequence[int]], split: LeaveOneOutSplit | None,
          rng_seed: int, hyper: SeqHyper | None = None, epochs: int | None = None,
          params: Sequence[torch.nn.Parameter] | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainHistory:
    """Train ``model`` in place and leave it holding the best-validation parameters.

    ``sequences`` are the training prefixes; ``split`` supplies validation targets
    for early stopping (skipped when None). ``params`` restricts which tensors are
    optimized (default: all).
    """
    hyper = hyper or model.hyper
    epochs = hyper.epochs if epochs is None else epochs
    rng = np.random.default_rng(rng_seed)
    gen = make_generator(rng_seed + 1)
    data = training_pairs(sequences, model.hyper.max_len)
    history = TrainHistory()
    if split is not None:
        history.best_val = evaluate_ndcg5(model, split)
        history.val_ndcg5.append(history.best_val)
    best_state = copy.deepcopy(model.state_dict())
    if epochs == 0 or not data:
        return history
    trainable = list(params) if params is not None else [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=hyper.lr)
    last_finite = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            chunk = [data[i] for i in order[start:start + hyper.batch_size]]
            loss = _batch_loss(model, chunk, rng, gen)
            if not torch.isfinite(loss):
                model.load_state_dict(last_finite)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_finite)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        last_finite = copy.deepcopy(model.state_dict())
        mean_loss = total / count
        history.losses.append(mean_loss)
        val = float("nan")
        if split is not None:
            val = evaluate_ndcg5(model, split)
            history.val_ndcg5.append(val)
            if val > history.best_val:
                history.best_val, history.best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
        else:
            best_state = last_finite
            history.best_epoch = epoch
        logger.debug("epoch %d loss %.6f val_ndcg@5 %.6f", epoch, mean_loss, val)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, val)
        if split is not None and stale >= hyper.patience:
            logger.info("early stop at epoch %d (best %d, ndcg@5 %.4f)", epoch, history.best_epoch, history.best_val)
            break
    model.load_state_dict(best_state)
    model.eval()
    return history


def mean_training_loss(model: SeqRecModel, sequences: Sequence[Sequence[int]], rng_seed: int) -> float:
    """Mean BPR loss over one pass with dropout off and fixed negatives."""
    rng = np.random.default_rng(rng_seed)
    data = training_pairs(sequences, model.hyper.max_len)
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), model.hyper.batch_size):
            chunk = data[start:start + model.hyper.batch_size]
            total += float(_batch_loss(model, chunk, rng, None)) * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def pretrain(store: InteractionStore, hyper: SeqHyper, rng_seed: int,
             split: LeaveOneOutSplit | None = None) -> tuple[SeqRecModel, LeaveOneOutSplit, TrainHistory]:
    """Fit a fresh model on the leave-one-out training prefixes of ``store``."""
    hyper.validate()
    if store.num_items == 0 or store.num_users == 0:
        raise ValueError("empty store")
    if split is None:
        split = split_leave_one_out(store, rng_seed)
    torch.manual_seed(rng_seed)
    model = SeqRecModel(store.num_items, hyper)
    history = train(model, split.train, split, rng_seed, hyper)
    return model, split, history


def select_learning_rate(store: InteractionStore, hyper: SeqHyper, rng_seed: int,
                         grid: Sequence[float] = (1e-3, 3e-4, 1e-4, 3e-5)):
    """Grid search over learning rates; returns the run with the best validation NDCG@5."""
    best = None
    for lr in grid:
        run = pretrain(store, dataclasses.replace(hyper, lr=lr), rng_seed)
        if best is None or run[2].best_val > best[2].best_val:
            best = run
    return best

