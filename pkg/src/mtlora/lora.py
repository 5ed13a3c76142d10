"""Linear layers with task-agnostic and task-specific low-rank adapters."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import Module, uniform_init
from .rng import Rng
from .tensor import Parameter, Tensor, flop_scope, get_default_dtype, linear


class LoRAAdapter(Module):
    """Low-rank update ``alpha * B @ A`` for a ``d_in -> d_out`` linear map.

    ``B`` starts at zero, so a fresh adapter contributes exactly nothing.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, role: str = "lora_shared"):
        if rank < 1:
            raise ConfigurationError(f"adapter rank must be positive, got {rank}")
        if rank > min(d_in, d_out):
            raise ConfigurationError(f"adapter rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")
        if alpha < 0:
            raise ConfigurationError(f"adapter scale must be nonnegative, got {alpha}")
        dtype = get_default_dtype()
        self.A = Parameter(np.zeros((rank, d_in), dtype=dtype), role=role)
        self.B = Parameter(np.zeros((d_out, rank), dtype=dtype), role=role)
        self.rank = rank
        self.alpha = float(alpha)

    def reset(self, rng: Rng) -> None:
        d_in = self.A.shape[1]
        self.A.data[...] = uniform_init(rng, self.A.shape, d_in)
        self.B.data[...] = 0.0

    def delta(self, x: Tensor) -> Tensor:
        # Two rank-r products; B @ A is never formed here.
        return linear(linear(x, self.A), self.B) * self.alpha

    def merged_delta(self) -> np.ndarray:
        return self.alpha * (self.B.data @ self.A.data)


class MTLoRALinear(Module):
    """Frozen linear layer carrying a shared adapter and per-task adapters.

    ``forward`` is the shared (task-agnostic) path.  ``forward_tasks`` also
    produces one output per task, either from the shared input (when
    ``x_tasks`` is None) or from per-task inputs.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: Rng,
        *,
        bias: bool = True,
        r_shared: int = 0,
        r_ts: int = 0,
        tasks: Iterable[str] = (),
        alpha: float = 4.0,
        role: str = "weight",
    ):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(uniform_init(rng, (d_out, d_in), d_in), role=role, trainable=False)
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in), role="bias", trainable=False) if bias else None
        self.shared = LoRAAdapter(d_in, d_out, r_shared, alpha, "lora_shared") if r_shared else None
        self.task_adapters: dict[str, LoRAAdapter] = {}
        if r_ts:
            for task in sorted(tasks):
                self.task_adapters[task] = LoRAAdapter(d_in, d_out, r_ts, alpha, "lora_task")
        # Set when a shared adapter has been folded in while task branches
        # still need the original weight.
        self.shared_weight: Parameter | None = None

    @property
    def alpha(self) -> float:
        for ad in self.adapters():
            return ad.alpha
        return 0.0

    def adapters(self) -> list[LoRAAdapter]:
        out = [self.shared] if self.shared is not None else []
        return out + [self.task_adapters[t] for t in sorted(self.task_adapters)]

    def set_alpha(self, alpha: float) -> None:
        for ad in self.adapters():
            ad.alpha = float(alpha)

    def base(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"expected input extent {self.d_in}, got shape {x.shape}")
        if self.shared_weight is not None:
            return linear(x, self.shared_weight, self.bias)
        out = self.base(x)
        if self.shared is not None:
            out = out + self.shared.delta(x)
        return out

    def forward_tasks(
        self, x_shared: Tensor, x_tasks: Mapping[str, Tensor] | None = None, tasks: Iterable[str] | None = None
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """Shared output plus one specialised output per task.

        Without ``x_tasks`` every task branches off the shared input and the
        base product is computed once; with ``x_tasks`` each task runs the
        base weights on its own input.
        """
        names = sorted(x_tasks) if x_tasks is not None else sorted(tasks if tasks is not None else self.task_adapters)
        for t in names:
            if t not in self.task_adapters:
                raise ConfigurationError(f"no task-specific adapter for task {t!r}")
        if x_shared.shape[-1] != self.d_in:
            raise DimensionError(f"expected input extent {self.d_in}, got shape {x_shared.shape}")
        y_tasks: dict[str, Tensor] = {}
        if x_tasks is None:
            base = self.base(x_shared)
            if self.shared_weight is not None:
                y_shared = linear(x_shared, self.shared_weight, self.bias)
            elif self.shared is not None:
                y_shared = base + self.shared.delta(x_shared)
            else:
                y_shared = base
            for t in names:
                with flop_scope(f"task:{t}"):
                    y_tasks[t] = base + self.task_adapters[t].delta(x_shared)
        else:
            y_shared = self.forward(x_shared)
            for t in names:
                with flop_scope(f"task:{t}"):
                    xt = x_tasks[t]
                    y_tasks[t] = self.base(xt) + self.task_adapters[t].delta(xt)
        return y_shared, y_tasks

    def forward_streams(
        self, x_shared: Tensor, x_tasks: Mapping[str, Tensor] | None, tasks: Iterable[str]
    ) -> tuple[Tensor, dict[str, Tensor] | None]:
        """Route a shared stream and optional task streams through the layer.

        Layers without task adapters apply the shared-path function to every
        stream; ``None`` task streams stay ``None`` (identical to shared).
        """
        if self.task_adapters:
            return self.forward_tasks(x_shared, x_tasks, tasks)
        y = self.forward(x_shared)
        if x_tasks is None:
            return y, None
        out = {}
        for t in sorted(x_tasks):
            with flop_scope(f"task:{t}"):
                out[t] = self.forward(x_tasks[t])
        return y, out


def lora_forward(layer: MTLoRALinear, x: Tensor) -> Tensor:
    return layer.forward(x)


def mtlora_forward(layer: MTLoRALinear, x_shared: Tensor, x_tasks: Mapping[str, Tensor] | None = None):
    return layer.forward_tasks(x_shared, x_tasks)


def init_adapters(layer: MTLoRALinear, rng: Rng) -> None:
    """A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0 for every adapter on ``layer``."""
    for ad in layer.adapters():
        ad.reset(rng)


def merge_adapter(layer: MTLoRALinear, which: str = "shared") -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(W + alpha * B @ A, b)`` for the shared adapter or task ``which``."""
    if which == "shared":
        adapter = layer.shared
    else:
        adapter = layer.task_adapters.get(which)
    if adapter is None:
        raise ConfigurationError(f"layer has no {which!r} adapter to merge")
    # accumulate in float64 and round once
    delta = adapter.alpha * (adapter.B.data.astype(np.float64) @ adapter.A.data.astype(np.float64))
    weight = (layer.weight.data.astype(np.float64) + delta).astype(layer.weight.dtype)
    bias = None if layer.bias is None else layer.bias.data.copy()
    return weight, bias


def adapter_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)

