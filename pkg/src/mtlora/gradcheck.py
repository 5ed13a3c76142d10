"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor, backward, clear_tape, no_grad


def _scalar(value):
    if not isinstance(value, Tensor) or value.size != 1:
        raise UsageError("grad_check needs a function returning a scalar tensor")
    # keep the numpy scalar so a wide numeric dtype survives the subtraction
    return value.data.reshape(())[()]


def grad_check_report(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, numeric_dtype=None
) -> list[float]:
    """Per-parameter max relative error between analytic and numeric gradients.

    Relative error for one entry is ``|a - n| / max(|a|, |n|, 1e-8)`` where
    ``n = (f(p + eps) - f(p - eps)) / (2 eps)``.  Parameters must be float64.

    ``numeric_dtype`` (e.g. ``np.longdouble``) evaluates the differences at a
    wider precision, which keeps rounding noise in ``f`` from swamping the
    tiny gradient entries a large model inevitably has.
    """
    for p in params:
        if p.dtype != np.float64:
            raise UsageError("grad_check must run in 64-bit mode")
    for p in params:
        p.grad = None
    clear_tape()
    loss = f()
    _scalar(loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    originals = [p.data for p in params]
    if numeric_dtype is not None:
        for p in params:
            p.data = p.data.astype(numeric_dtype)
    errors = []
    try:
        with no_grad():
            errors = _numeric_errors(f, params, analytic, eps)
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return errors


def _numeric_errors(f, params, analytic, eps) -> list[float]:
    errors = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = a.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f())
            flat[i] = orig - eps
            down = _scalar(f())
            flat[i] = orig
            num = float((up - down) / (2 * eps))
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, float(abs(ga[i] - num) / denom))
        errors.append(worst)
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, numeric_dtype=None) -> float:
    """Max relative error over every entry of every parameter in ``params``."""
    errors = grad_check_report(f, params, eps, numeric_dtype)
    return max(errors) if errors else 0.0


def tiny_model_gradcheck(seed: int = 0, eps: float = 1e-5, numeric_dtype=np.longdouble) -> dict[str, float]:
    """Check every trainable parameter of a small two-task model in float64.

    The model has one stage of two blocks (C=8) on 8x8 inputs; adapter B
    matrices are randomised so the low-rank paths carry gradient.  Returns
    the max relative error per parameter name.
    """
    from .backbone import BackboneConfig
    from .heads import TaskSpec
    from .losses import mtl_loss, task_loss
    from .model import build_model
    from .rng import make_rng
    from .tensor import default_dtype

    cfg = BackboneConfig(embed_dim=8, depths=(2,), heads=(2,), image_size=8, r_shared=2, r_ts=2, alpha=1.5)
    tasks = [
        TaskSpec("sal", 1, "balanced_bce", "miou"),
        TaskSpec("seg", 3, "cross_entropy", "miou", weight=0.7),
    ]
    rng = make_rng(seed, "gradcheck")
    with default_dtype(np.float64):
        model = build_model(cfg, tasks, "mtlora", seed=seed, fusion_dim=8)
    for name, p in model.named_parameters():
        if name.endswith(".B"):
            p.data = rng.normal(0.0, 0.3, p.shape)
    images = rng.uniform(0.0, 1.0, (2, 3, 8, 8))
    targets = {"sal": (rng.uniform(size=(2, 8, 8)) > 0.5).astype(np.int64), "seg": rng.integers(0, 3, (2, 8, 8))}
    weights = {t.id: t.weight for t in tasks}

    def loss():
        out = model(images)
        return mtl_loss({t.id: task_loss(t, out[t.id], targets[t.id]) for t in tasks}, weights)

    named = [(n, p) for n, p in model.named_parameters() if p.trainable]
    errors = grad_check_report(loss, [p for _, p in named], eps, numeric_dtype)
    return {n: e for (n, _), e in zip(named, errors)}
