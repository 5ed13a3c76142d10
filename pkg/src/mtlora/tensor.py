"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable operation appends its output node to a module-level
tape while gradient recording is enabled.  ``backward`` walks that tape in
reverse creation order (a valid topological order), then frees it.

Leaf tensors that took part in the recorded computation but cannot reach the
loss get an all-zero gradient; leaves that never took part keep ``grad is
None``.  Both cases are therefore distinguishable after a backward pass.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "FlopCounter",
    "backward",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "count_flops",
    "flop_scope",
    "clear_tape",
    "tape_size",
    "matmul",
    "linear",
    "softmax_lastdim",
    "softmax",
    "layer_norm",
    "gelu",
    "bilinear_resize",
    "take",
    "concat",
    "cross_entropy",
]


class _State:
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)
        self.tape: list[Tensor] = []
        self.counter: FlopCounter | None = None


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def get_default_dtype() -> np.dtype:
    return _state.dtype


def clear_tape() -> None:
    _state.tape.clear()


def tape_size() -> int:
    return len(_state.tape)


class FlopCounter:
    """Accumulates matmul FLOPs (one multiply-add = 2 FLOPs) by scope."""

    def __init__(self):
        self.flops = 0
        self.matmuls = 0
        self.by_scope: dict[str, int] = defaultdict(int)
        self._scopes: list[str] = []

    def add(self, flops: int) -> None:
        self.flops += flops
        self.matmuls += 1
        self.by_scope[self._scopes[-1] if self._scopes else "trunk"] += flops


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    prev = _state.counter
    counter = FlopCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextlib.contextmanager
def flop_scope(name: str):
    """Attribute matmuls issued inside the block to ``name``."""
    counter = _state.counter
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


def _count(flops: int) -> None:
    if _state.counter is not None:
        _state.counter.add(int(flops))


class Tensor:
    """An n-dimensional array that can record the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of common ops -----------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a=-2, b=-1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


class Parameter(Tensor):
    """A named leaf tensor owned by a model.

    ``role`` tags the parameter group (base weight, bias, layer norm, adapter,
    ...) that freeze policies and audits key on.
    """

    __slots__ = ("name", "role")

    def __init__(self, data, role: str = "weight", trainable: bool = True, name: str = "", dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.role = role

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role}, trainable={self.trainable})"


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _state.tape.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every recorded leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("backward() needs a scalar tensor")
    if loss._backward is None:
        raise UsageError("backward() called on a tensor with no recorded tape")
    tape = _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    counter, _state.counter = _state.counter, None
    try:
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            for p in node._parents:
                if p._backward is None and p.requires_grad:
                    leaves[id(p)] = p
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        for leaf in leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    finally:
        _state.counter = counter
        tape.clear()


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    return _node(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _node(out, (a,), bw)


# -- reductions and shape ops ------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    fancy = _is_fancy(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(np.asarray(a.data[index]), (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[..., index]`` along the last axis."""
    index = np.asarray(index)
    n = table.shape[-1]
    flat = index.ravel()

    def bw(g):
        lead = table.shape[:-1]
        g2 = g.reshape(-1, flat.size)
        out = np.stack([np.bincount(flat, weights=row, minlength=n) for row in g2])
        return (out.reshape(lead + (n,)).astype(table.dtype, copy=False),)

    return _node(table.data[..., index], (table,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    _count(2 * out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear expects last extent {d_in}, got input shape {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data
    _count(2 * x2.shape[0] * d_in * d_out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _node(out.reshape(lead + (d_out,)), parents, bw)


# -- normalization and probabilities -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, -1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Mean softmax cross-entropy; ``target`` holds integer class ids."""
    ax = axis % logits.ndim
    target = np.asarray(target)
    if target.shape != logits.shape[:ax] + logits.shape[ax + 1 :]:
        raise DimensionError(f"cross_entropy target shape {target.shape} does not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, np.expand_dims(target, ax), axis=ax)
    n = target.size
    out = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(target, ax), 1.0, axis=ax)
        return ((grad - onehot) * (g / n),)

    return _node(out, (logits,), bw)


# -- resampling ---------------------------------------------------------------

_resize_cache: dict[tuple, np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _resize_cache.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        scale = n_in / n_out
        for i in range(n_out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(math.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            w1 = src - i0
            m[i, i0] += 1.0 - w1
            m[i, i1] += w1
        m = m.astype(dtype)
        _resize_cache[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, channels_last: bool = False) -> Tensor:
    """Bilinear resampling with the half-pixel (align_corners=False) convention.

    Works on the last two axes ``(..., h, w)``, or on ``(..., h, w, c)`` when
    ``channels_last`` is set.  Equal sizes pass the input through untouched.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h_ax, w_ax = (-3, -2) if channels_last else (-2, -1)
    h, w = x.shape[h_ax], x.shape[w_ax]
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(h, out_h, x.dtype)
    rx = _resize_matrix(w, out_w, x.dtype)
    if channels_last:
        fwd, rev = "ph,...hwc,qw->...pqc", "ph,...pqc,qw->...hwc"
    else:
        fwd, rev = "ph,...hw,qw->...pq", "ph,...pq,qw->...hw"
    out = np.einsum(fwd, ry, x.data, rx, optimize=True)
    return _node(out, (x,), lambda g: (np.einsum(rev, ry, g, rx, optimize=True),))


def numel(params: Iterable[Parameter]) -> int:
    """Total number of scalars in ``params``."""
    return sum(p.size for p in params)
