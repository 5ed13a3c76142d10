"""Closed-form trainable-parameter and FLOPs accounting.

Everything here is computed from layer shapes alone, without building a
model, so the numbers can be checked against a live model (parameter
enumeration, instrumented forward pass) as an independent route.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

from .backbone import LOCATIONS, BackboneConfig
from .errors import ConfigurationError, UsageError
from .heads import TaskSpec, default_tasks
from .model import FreezePolicy, strategy_setup

GROUPS = (
    "shared_adapters",
    "task_adapters",
    "decoders",
    "patch_embed",
    "patch_merging",
    "layer_norm",
    "position_bias",
    "biases",
    "base_weights",
)
FUSION_BLOCKS = 2
FLOPS_CONVENTION = "FLOPs count 2 per multiply-add over matmuls and linear layers; elementwise ops are ignored"


@dataclass
class ArchPreset:
    """Shapes needed for closed-form accounting.

    ``window`` sets the attention span used for position-bias tables and
    attention FLOPs; ``None`` means global attention over the stage grid.
    """

    name: str
    backbone: BackboneConfig
    tasks: list[TaskSpec]
    fusion_dim: int
    window: int | None = None

    @classmethod
    def from_config(cls, cfg: BackboneConfig, tasks: Sequence[TaskSpec] | None = None, fusion_dim: int | None = None):
        return cls("desk", cfg, list(tasks or default_tasks()), fusion_dim or cfg.embed_dim)


def swin_tiny() -> ArchPreset:
    """Swin-Tiny shaped encoder with the four PASCAL-Context style dense tasks."""
    cfg = BackboneConfig(
        embed_dim=96,
        depths=(2, 2, 6, 2),
        heads=(3, 6, 12, 24),
        image_size=224,
        r_shared=64,
        r_ts=4,
    )
    tasks = [
        TaskSpec("normals", 3, "l1", "angular_rmse"),
        TaskSpec("parts", 7, "cross_entropy", "miou"),
        TaskSpec("saliency", 1, "balanced_bce", "miou"),
        TaskSpec("semseg", 21, "cross_entropy", "miou"),
    ]
    return ArchPreset("swin-tiny", cfg, tasks, fusion_dim=208, window=7)


PRESETS = {"swin-tiny": swin_tiny}


def get_preset(name: str) -> ArchPreset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass
class AuditReport:
    strategy: str
    preset: str
    groups: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.groups.values())

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "preset": self.preset, "groups": dict(self.groups), "total": self.total}

    def format(self) -> str:
        width = max(len(g) for g in self.groups)
        lines = [f"trainable parameters: preset={self.preset} strategy={self.strategy}"]
        lines += [f"  {g:<{width}}  {n:>12,d}" for g, n in self.groups.items()]
        lines.append(f"  {'total':<{width}}  {self.total:>12,d}  ({self.total / 1e6:.2f}M)")
        return "\n".join(lines)


def _as_preset(target) -> ArchPreset:
    if isinstance(target, ArchPreset):
        return target
    if isinstance(target, BackboneConfig):
        return ArchPreset.from_config(target)
    if isinstance(target, str):
        return get_preset(target)
    raise TypeError(f"expected a preset, preset name or BackboneConfig, got {type(target).__name__}")


def _linear_shapes(cfg: BackboneConfig, dim: int) -> dict[str, tuple[int, int]]:
    hidden = cfg.mlp_ratio * dim
    return {"qkv": (dim, 3 * dim), "proj": (dim, dim), "fc1": (dim, hidden), "fc2": (hidden, dim)}


def _ts_locations(cfg: BackboneConfig) -> set[str]:
    capable = set(LOCATIONS) if cfg.ts_on_qkv else {"proj", "fc1", "fc2"}
    return capable & set(cfg.adapt_locations)


def _window_tokens(preset: ArchPreset, grid: tuple[int, int]) -> tuple[int, int]:
    h, w = grid
    if preset.window is None:
        return h, w
    return min(h, preset.window), min(w, preset.window)


def _decoder_params(preset: ArchPreset, task: TaskSpec) -> int:
    cfg, d = preset.backbone, preset.fusion_dim
    fusion = sum(cfg.stage_dim(s) * d + d for s in range(cfg.num_stages))
    blocks = FUSION_BLOCKS * 2 * (d * d + d)
    return fusion + blocks + d * task.out_channels + task.out_channels


def count_trainable(
    target,
    strategy: str = "mtlora",
    r: int | None = None,
    r_ts: int | None = None,
    locations: Sequence[str] | None = None,
    policy: FreezePolicy | None = None,
    tasks: Sequence[TaskSpec] | None = None,
) -> AuditReport:
    """Exact per-group trainable-parameter counts for a strategy.

    ``r``, ``r_ts`` and ``locations`` override the preset's backbone
    settings before the strategy adjusts them.
    """
    preset = _as_preset(target)
    cfg = preset.backbone
    overrides = {}
    if r is not None:
        overrides["r_shared"] = r
    if r_ts is not None:
        overrides["r_ts"] = r_ts
    if locations is not None:
        overrides["adapt_locations"] = tuple(locations)
    cfg = dataclasses.replace(cfg, **overrides)
    cfg, policy = strategy_setup(cfg, strategy, policy)
    cfg.validate()
    tasks = list(tasks if tasks is not None else preset.tasks)
    n_tasks = len(tasks)
    branching = cfg.r_ts > 0 and n_tasks > 0

    g = dict.fromkeys(GROUPS, 0)
    c0 = cfg.embed_dim
    if policy.train_patch_embed:
        g["patch_embed"] = cfg.in_channels * cfg.patch_size**2 * c0 + c0
    if policy.train_layer_norm:
        g["layer_norm"] += 2 * c0
    for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        dim = cfg.stage_dim(s)
        shapes = _linear_shapes(cfg, dim)
        wh, ww = _window_tokens(preset, cfg.stage_grid(s))
        for i in range(depth):
            for loc in cfg.adapt_locations:
                d_in, d_out = shapes[loc]
                g["shared_adapters"] += cfg.r_shared * (d_in + d_out)
            if branching and i == depth - 1:
                for loc in _ts_locations(cfg):
                    d_in, d_out = shapes[loc]
                    g["task_adapters"] += n_tasks * cfg.r_ts * (d_in + d_out)
            if policy.train_layer_norm:
                g["layer_norm"] += 2 * 2 * dim
            if policy.train_position_bias:
                g["position_bias"] += heads * (2 * wh - 1) * (2 * ww - 1)
            if policy.train_biases:
                g["biases"] += sum(d_out for _, d_out in shapes.values())
            if policy.train_base_weights:
                g["base_weights"] += sum(d_in * d_out for d_in, d_out in shapes.values())
        if s < cfg.num_stages - 1:
            if policy.train_layer_norm:
                g["layer_norm"] += 2 * 4 * dim
            if cfg.patch_merge_mode == "lora":
                g["shared_adapters"] += cfg.r_shared * (4 * dim + 2 * dim)
            if policy.train_patch_merging and cfg.patch_merge_mode != "frozen":
                g["patch_merging"] += 4 * dim * 2 * dim
    g["decoders"] = sum(_decoder_params(preset, t) for t in tasks)
    return AuditReport(strategy, preset.name, g)


# -- FLOPs -------------------------------------------------------------------


@dataclass
class FlopsBreakdown:
    """FLOPs of one shared-trunk pass plus each task's own branch and head."""

    trunk: int
    per_task: dict[str, int]

    @property
    def total(self) -> int:
        return self.trunk + sum(self.per_task.values())


def _layer_flops(n: int, d_in: int, d_out: int, r_shared: int, r_ts: int, n_tasks: int, branched: bool):
    """(trunk, per-task, branched_after) FLOPs for one adapted linear on ``n`` rows."""
    base = 2 * n * d_in * d_out
    shared = 2 * n * r_shared * (d_in + d_out)
    task_delta = 2 * n * r_ts * (d_in + d_out)
    if r_ts and n_tasks:
        if branched:
            # each task runs the frozen weight on its own input
            return base + shared, base + task_delta, True
        # the base product on the shared input is reused by every task
        return base + shared, task_delta, True
    if branched:
        return base + shared, base + shared, True
    return base + shared, 0, False


def flops_breakdown(target, k: int | None = None, batch: int = 1, tasks: Sequence[TaskSpec] | None = None) -> FlopsBreakdown:
    """Static FLOPs for one forward pass of a model serving the first ``k`` tasks."""
    preset = _as_preset(target)
    cfg = preset.backbone
    cfg.validate()
    tasks = list(tasks if tasks is not None else preset.tasks)
    if k is not None:
        if not 1 <= k <= len(tasks):
            raise ConfigurationError(f"task count must be in 1..{len(tasks)}, got {k}")
        tasks = tasks[:k]
    n_tasks = len(tasks)
    branching = cfg.r_ts > 0 and n_tasks > 0
    d0 = cfg.embed_dim
    n0 = cfg.stage_grid(0)[0] * cfg.stage_grid(0)[1]
    trunk = 2 * n0 * cfg.in_channels * cfg.patch_size**2 * d0
    task_branch = 0
    for s, depth in enumerate(cfg.depths):
        dim = cfg.stage_dim(s)
        h, w = cfg.stage_grid(s)
        n = h * w
        wh, ww = _window_tokens(preset, (h, w))
        attn = 4 * n * wh * ww * dim
        shapes = _linear_shapes(cfg, dim)
        ts_locs = _ts_locations(cfg)
        for i in range(depth):
            ts_block = branching and i == depth - 1
            branched = False
            for loc in ("qkv", "proj", "fc1", "fc2"):
                d_in, d_out = shapes[loc]
                r_sh = cfg.r_shared if loc in cfg.adapt_locations else 0
                r_t = cfg.r_ts if ts_block and loc in ts_locs else 0
                tr, pt, branched = _layer_flops(n, d_in, d_out, r_sh, r_t, n_tasks, branched)
                trunk += tr
                task_branch += pt
                if loc == "qkv":
                    trunk += attn
                    if branched:
                        task_branch += attn
        if s < cfg.num_stages - 1:
            m = n // 4
            trunk += 2 * m * 4 * dim * 2 * dim
            if cfg.patch_merge_mode == "lora":
                trunk += 2 * m * cfg.r_shared * 6 * dim
    d = preset.fusion_dim
    head = sum(2 * (cfg.stage_grid(s)[0] * cfg.stage_grid(s)[1]) * cfg.stage_dim(s) * d for s in range(cfg.num_stages))
    head += FUSION_BLOCKS * 2 * 2 * n0 * d * d
    per_task = {t.id: batch * (task_branch + head + 2 * n0 * d * t.out_channels) for t in tasks}
    return FlopsBreakdown(batch * trunk, per_task)


def estimate_flops(target, k: int, mode: str = "shared", batch: int = 1) -> int:
    """FLOPs to serve ``k`` tasks.

    ``shared`` runs one trunk pass plus every task's branch and head;
    ``individual`` runs a separate single-task model per task.
    """
    preset = _as_preset(target)
    if k < 1:
        raise ConfigurationError("task count must be at least 1")
    if mode == "shared":
        return flops_breakdown(preset, k, batch).total
    if mode == "individual":
        return sum(flops_breakdown(preset, batch=batch, tasks=[t]).total for t in preset.tasks[:k])
    raise UsageError(f"unknown FLOPs mode {mode!r}; expected 'shared' or 'individual'")


def live_flops(model, images) -> tuple[int, dict[str, int]]:
    """Run one instrumented inference pass and return (total, by scope)."""
    from .tensor import count_flops, no_grad

    with no_grad(), count_flops() as counter:
        model(images)
    return counter.flops, dict(counter.by_scope)
