"""Minimal module system: parameter discovery, naming and plain layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .rng import Rng
from .tensor import Parameter, Tensor, get_default_dtype, layer_norm, linear


class Module:
    """Base class; parameters are discovered from instance attributes.

    Attributes holding a ``Parameter``, a ``Module``, or a list/dict of those
    are walked in definition order (dict keys sorted), which fixes both the
    dotted parameter names and the iteration order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk(value, prefix + attr)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for attr, value in vars(self).items():
            items = [(attr, value)]
            if isinstance(value, (list, tuple)):
                items = [(f"{attr}.{i}", v) for i, v in enumerate(value)]
            elif isinstance(value, dict):
                items = [(f"{attr}.{k}", value[k]) for k in sorted(value)]
            for path, v in items:
                if isinstance(v, Module):
                    yield from v.named_modules(f"{prefix}{path}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter {name} is registered twice")
            seen.add(id(p))
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(value[key], f"{path}.{key}")


def uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    """Plain trainable linear layer (used by the task heads)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, role: str = "head", bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (d_out, d_in), d_in), role=role)
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in), role=role) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, role: str = "layer_norm"):
        dtype = get_default_dtype()
        self.weight = Parameter(np.ones(dim, dtype=dtype), role=role)
        self.bias = Parameter(np.zeros(dim, dtype=dtype), role=role)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)
