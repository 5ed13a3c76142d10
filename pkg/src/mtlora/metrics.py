"""Evaluation metrics and the multi-task delta against single-task baselines."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError


def confusion(pred: np.ndarray, target: np.ndarray, n_classes: int) -> np.ndarray:
    idx = target.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean of TP / (TP + FP + FN) over classes present in prediction or target."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / denom[present]))


def miou(pred: np.ndarray, target: np.ndarray, n_classes: int) -> float:
    return miou_from_confusion(confusion(pred, target, n_classes))


def angular_errors(pred: np.ndarray, target: np.ndarray, axis: int = 1) -> np.ndarray:
    """Per-pixel angle in degrees between (normalised) predicted and true vectors."""
    p = pred / np.maximum(np.linalg.norm(pred, axis=axis, keepdims=True), 1e-12)
    t = target / np.maximum(np.linalg.norm(target, axis=axis, keepdims=True), 1e-12)
    cos = np.clip((p * t).sum(axis=axis), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def angular_rmse(pred: np.ndarray, target: np.ndarray, axis: int = 1) -> float:
    err = angular_errors(pred, target, axis)
    return float(np.sqrt(np.mean(err * err)))


def delta_m(metrics: Sequence[float], baseline: Sequence[float], lower_is_better: Sequence[bool]) -> float:
    """Average signed relative change vs the baselines, in percent.

    Lower-is-better metrics have their sign flipped, so positive means the
    multi-task model beats the single-task baselines on average.
    """
    if not (len(metrics) == len(baseline) == len(lower_is_better)) or not metrics:
        raise ValueError("metrics, baselines and flags must be non-empty and aligned")
    total = 0.0
    for m, st, low in zip(metrics, baseline, lower_is_better):
        if st == 0:
            raise DomainError("baseline metric is zero")
        total += (-1.0 if low else 1.0) * (m - st) / st
    return 100.0 * total / len(metrics)
