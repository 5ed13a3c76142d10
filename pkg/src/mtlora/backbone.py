"""Hierarchical transformer encoder with shared and task-specific adapters.

Each stage runs ``depth - 1`` task-agnostic (TA) blocks followed by one
task-specific (TS) block.  The TS block branches one stream per task off the
shared stream; the shared stream continues into the next stage while the
task streams leave the backbone as that stage's per-task features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .lora import MTLoRALinear, init_adapters
from .nn import LayerNorm, Linear, Module
from .rng import make_rng
from .tensor import Parameter, Tensor, flop_scope, gelu, get_default_dtype, matmul, softmax_lastdim, take

LOCATIONS = ("qkv", "proj", "fc1", "fc2")
MERGE_MODES = ("frozen", "unfrozen", "lora")


@dataclass
class BackboneConfig:
    in_channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    mlp_ratio: int = 4
    r_shared: int = 16
    r_ts: int = 4
    alpha: float = 4.0
    alpha_overrides: dict[str, float] = field(default_factory=dict)
    adapt_locations: tuple[str, ...] = LOCATIONS
    patch_merge_mode: str = "unfrozen"
    ts_on_qkv: bool = False
    image_size: int = 64

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.adapt_locations = tuple(self.adapt_locations)
        self.alpha_overrides = dict(self.alpha_overrides)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2**stage

    def stage_grid(self, stage: int) -> tuple[int, int]:
        g = self.image_size // self.patch_size // 2**stage
        return g, g

    def validate(self) -> None:
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigurationError("depths and heads must be non-empty and of equal length")
        if any(d < 1 for d in self.depths):
            raise ConfigurationError("every stage needs at least one block")
        bad = set(self.adapt_locations) - set(LOCATIONS)
        if bad:
            raise ConfigurationError(f"unknown adapter locations {sorted(bad)}")
        if self.patch_merge_mode not in MERGE_MODES:
            raise ConfigurationError(f"patch_merge_mode must be one of {MERGE_MODES}")
        if self.r_shared < 0 or self.r_ts < 0 or self.alpha < 0:
            raise ConfigurationError("ranks and alpha must be nonnegative")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        for s in range(self.num_stages):
            dim = self.stage_dim(s)
            if dim % self.heads[s]:
                raise ConfigurationError(f"stage {s} width {dim} not divisible by {self.heads[s]} heads")
            h, w = self.stage_grid(s)
            if h < 1 or (s < self.num_stages - 1 and (h % 2 or w % 2)):
                raise ConfigurationError(f"stage {s} token grid {h}x{w} cannot be merged")


@dataclass
class StageOutput:
    shared: Tensor
    per_task: dict[str, Tensor]
    grid: tuple[int, int]


def relative_position_index(h: int, w: int) -> np.ndarray:
    """Index into a ``(2h-1)(2w-1)`` bias table for every token pair."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    dy = ys[:, None] - ys[None, :] + h - 1
    dx = xs[:, None] - xs[None, :] + w - 1
    return dy * (2 * w - 1) + dx


def attend(qkv: Tensor, heads: int, bias: Tensor) -> Tensor:
    """Multi-head attention over all tokens from a packed ``[B, N, 3C]`` input."""
    b, n, c3 = qkv.shape
    c = c3 // 3
    dh = c // heads
    t = qkv.reshape(b, n, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = t[0], t[1], t[2]
    scores = matmul(q * (1.0 / math.sqrt(dh)), k.transpose(-2, -1)) + bias
    out = matmul(softmax_lastdim(scores), v)
    return out.permute(0, 2, 1, 3).reshape(b, n, c)


class Block(Module):
    """Pre-norm transformer block; ``kind`` is "TA" or "TS"."""

    def __init__(self, dim: int, heads: int, grid: tuple[int, int], cfg: BackboneConfig, kind: str, tasks, rng):
        self.kind = kind
        self.heads = heads
        self.grid = grid
        ts = kind == "TS"
        loc = set(cfg.adapt_locations)

        def lin(name, d_in, d_out, ts_capable):
            return MTLoRALinear(
                d_in,
                d_out,
                rng,
                r_shared=cfg.r_shared if name in loc else 0,
                r_ts=cfg.r_ts if ts and ts_capable and name in loc else 0,
                tasks=tasks,
                alpha=cfg.alpha,
            )

        self.norm1 = LayerNorm(dim)
        self.qkv = lin("qkv", dim, 3 * dim, cfg.ts_on_qkv)
        h, w = grid
        table = rng.normal(0.0, 0.02, size=(heads, (2 * h - 1) * (2 * w - 1)))
        self.position_bias = Parameter(table.astype(get_default_dtype()), role="position_bias")
        self.proj = lin("proj", dim, dim, True)
        self.norm2 = LayerNorm(dim)
        self.fc1 = lin("fc1", dim, cfg.mlp_ratio * dim, True)
        self.fc2 = lin("fc2", cfg.mlp_ratio * dim, dim, True)
        self._index = relative_position_index(h, w)

    def linears(self) -> list[MTLoRALinear]:
        return [self.qkv, self.proj, self.fc1, self.fc2]

    def forward(self, x: Tensor, tasks: Sequence[str] = ()) -> tuple[Tensor, dict[str, Tensor] | None]:
        """Return the shared output and, for TS blocks, one output per task."""
        if x.shape[-2] != self.grid[0] * self.grid[1]:
            raise DimensionError(f"block expects {self.grid[0] * self.grid[1]} tokens, got {x.shape[-2]}")
        if self.kind == "TS" and tasks and not any(l.task_adapters for l in self.linears()):
            raise ConfigurationError("task-specific block has no task adapters")
        bias = take(self.position_bias, self._index)

        q_s, q_t = self.qkv.forward_streams(self.norm1(x), None, tasks)
        a_s = attend(q_s, self.heads, bias)
        a_t = _map(q_t, lambda t, q: attend(q, self.heads, bias))

        p_s, p_t = self.proj.forward_streams(a_s, a_t, tasks)
        x1 = x + p_s
        x1_t = _map(p_t, lambda t, p: x + p)

        f_s, f_t = self.fc1.forward_streams(self.norm2(x1), _map(x1_t, lambda t, v: self.norm2(v)), tasks)
        o_s, o_t = self.fc2.forward_streams(gelu(f_s), _map(f_t, lambda t, v: gelu(v)), tasks)
        out = x1 + o_s
        if o_t is None:
            return out, None
        return out, {t: (x1_t[t] if x1_t is not None else x1) + o_t[t] for t in o_t}


def _map(streams, fn):
    if streams is None:
        return None
    out = {}
    for t in sorted(streams):
        with flop_scope(f"task:{t}"):
            out[t] = fn(t, streams[t])
    return out


class Stage(Module):
    def __init__(self, blocks: list[Block]):
        self.blocks = blocks


class PatchEmbed(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        self.patch_size = cfg.patch_size
        d_in = cfg.in_channels * cfg.patch_size**2
        self.proj = Linear(d_in, cfg.embed_dim, rng, role="patch_embed")
        self.norm = LayerNorm(cfg.embed_dim)

    def forward(self, images) -> tuple[Tensor, tuple[int, int]]:
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim == 3:
            data = data[None]
        b, c, h, w = data.shape
        p = self.patch_size
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = data.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
        x = Tensor(patches, dtype=self.proj.weight.dtype)
        return self.norm(self.proj(x)), (gh, gw)


class PatchMerge(Module):
    """Concatenate 2x2 token neighbourhoods, normalise, project 4C -> 2C."""

    def __init__(self, dim: int, cfg: BackboneConfig, rng):
        self.norm = LayerNorm(4 * dim)
        r = cfg.r_shared if cfg.patch_merge_mode == "lora" else 0
        self.reduction = MTLoRALinear(4 * dim, 2 * dim, rng, bias=False, r_shared=r, alpha=cfg.alpha, role="patch_merge")

    def forward(self, x: Tensor, grid: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
        h, w = grid
        if h % 2 or w % 2:
            raise DimensionError(f"cannot merge odd token grid {h}x{w}")
        b, n, c = x.shape
        if n != h * w:
            raise DimensionError(f"token count {n} does not match grid {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 4, 2, 5).reshape(b, h * w // 4, 4 * c)
        return self.reduction(self.norm(x)), (h // 2, w // 2)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, tasks: Sequence[str], seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.tasks = tuple(sorted(tasks))
        rng = make_rng(seed, "backbone")
        self.patch_embed = PatchEmbed(cfg, rng)
        self.stages: list[Stage] = []
        self.merges: list[PatchMerge] = []
        branching = cfg.r_ts > 0 and bool(self.tasks)
        for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            dim = cfg.stage_dim(s)
            grid = cfg.stage_grid(s)
            blocks = []
            for i in range(depth):
                kind = "TS" if branching and i == depth - 1 else "TA"
                blocks.append(Block(dim, heads, grid, cfg, kind, self.tasks, rng))
            self.stages.append(Stage(blocks))
            if s < cfg.num_stages - 1:
                self.merges.append(PatchMerge(dim, cfg, rng))
        adapter_rng = make_rng(seed, "adapters")
        for layer in self.lora_layers():
            init_adapters(layer, adapter_rng)

    def lora_layers(self) -> list[MTLoRALinear]:
        return [m for _, m in self.named_modules() if isinstance(m, MTLoRALinear)]

    def blocks(self) -> list[Block]:
        return [b for stage in self.stages for b in stage.blocks]

    def forward(self, images) -> list[StageOutput]:
        """One pass of the shared trunk; per-task features at every stage end."""
        x, grid = self.patch_embed(images)
        outputs = []
        for s, stage in enumerate(self.stages):
            per_task = None
            for block in stage.blocks:
                x, branch = block(x, self.tasks)
                if branch is not None:
                    per_task = branch
            if per_task is None:
                per_task = {t: x for t in self.tasks}
            outputs.append(StageOutput(shared=x, per_task=per_task, grid=grid))
            if s < len(self.merges):
                x, grid = self.merges[s](x, grid)
        return outputs
