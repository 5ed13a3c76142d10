"""Per-task losses and their weighted multi-task sum."""

from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError
from .heads import TaskSpec
from .tensor import Tensor, cross_entropy, log, sigmoid

log_ = logging.getLogger(__name__)

PROB_CLAMP = 1e-6


def l1_normals(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error after L2-normalising predictions over the channel axis."""
    if pred.shape != target.shape:
        raise DimensionError(f"normals prediction {pred.shape} vs target {target.shape}")
    norm = ((pred * pred).sum(axis=1, keepdims=True) + 1e-12).sqrt()
    return ((pred / norm) - target).abs().mean()


def balanced_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Class-balanced binary cross-entropy on ``[B, 1, H, W]`` logits.

    Positives are weighted by ``N / (2 N+)`` and negatives by ``N / (2 N-)``;
    probabilities are clamped to ``[1e-6, 1 - 1e-6]``.  A batch without one
    of the classes falls back to the unweighted loss.
    """
    y = np.asarray(target).reshape(logits.shape).astype(logits.dtype)
    n = y.size
    n_pos = float(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        log_.info("balanced_bce: batch has a single class, using unweighted BCE")
        w_pos = w_neg = 1.0
    else:
        w_pos, w_neg = n / (2 * n_pos), n / (2 * n_neg)
    p = sigmoid(logits).clip(PROB_CLAMP, 1 - PROB_CLAMP)
    pos = Tensor(w_pos * y, dtype=logits.dtype)
    neg = Tensor(w_neg * (1 - y), dtype=logits.dtype)
    return -(pos * log(p) + neg * log(1 - p)).mean()


def task_loss(task: TaskSpec, logits: Tensor, target: np.ndarray) -> Tensor:
    if task.loss_kind == "cross_entropy":
        return cross_entropy(logits, target, axis=1)
    if task.loss_kind == "l1":
        return l1_normals(logits, target)
    return balanced_bce(logits, target)


def mtl_loss(losses: Mapping[str, Tensor], weights: Mapping[str, float]) -> Tensor:
    """Weighted sum of task losses; every task needs a weight."""
    total = None
    for task in sorted(losses):
        if task not in weights:
            raise ConfigurationError(f"no loss weight for task {task!r}")
        term = losses[task] * float(weights[task])
        total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("mtl_loss needs at least one task loss")
    return total
