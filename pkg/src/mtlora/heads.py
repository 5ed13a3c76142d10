"""Per-task multi-scale fusion and dense-prediction decoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigurationError
from .nn import Linear, Module
from .rng import make_rng
from .tensor import Tensor, bilinear_resize, gelu

LOSS_KINDS = ("cross_entropy", "l1", "balanced_bce")
METRIC_KINDS = ("miou", "angular_rmse")


@dataclass(frozen=True)
class TaskSpec:
    id: str
    out_channels: int
    loss_kind: str
    metric_kind: str
    weight: float = 1.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"task {self.id!r}: unknown loss kind {self.loss_kind!r}")
        if self.metric_kind not in METRIC_KINDS:
            raise ConfigurationError(f"task {self.id!r}: unknown metric kind {self.metric_kind!r}")
        if self.out_channels < 1:
            raise ConfigurationError(f"task {self.id!r}: out_channels must be positive")
        if not self.weight > 0:
            raise ConfigurationError(f"task {self.id!r}: loss weight must be positive")

    @property
    def lower_is_better(self) -> bool:
        return self.metric_kind == "angular_rmse"

    @property
    def num_classes(self) -> int:
        """Classes scored by mIoU (a single saliency logit scores 2 classes)."""
        return 2 if self.loss_kind == "balanced_bce" else self.out_channels


def default_tasks(n_classes: int = 3) -> list[TaskSpec]:
    """The four synthetic tasks: semantic classes, shape parts, saliency, normals."""
    return [
        TaskSpec("normals", 3, "l1", "angular_rmse"),
        TaskSpec("parts", 5, "cross_entropy", "miou"),
        TaskSpec("saliency", 1, "balanced_bce", "miou"),
        TaskSpec("semseg", n_classes + 1, "cross_entropy", "miou"),
    ]


class ResidualBlock(Module):
    def __init__(self, dim: int, rng):
        self.fc_a = Linear(dim, dim, rng)
        self.fc_b = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc_b(gelu(self.fc_a(x)))


class FusionModule(Module):
    """Project every scale to ``dim``, upsample to the finest grid, sum, refine."""

    def __init__(self, scale_dims: Sequence[int], dim: int, rng, n_blocks: int = 2):
        self.projections = [Linear(d, dim, rng) for d in scale_dims]
        self.blocks = [ResidualBlock(dim, rng) for _ in range(n_blocks)]
        self.dim = dim

    def forward(self, features: Sequence[Tensor], grids: Sequence[tuple[int, int]]) -> Tensor:
        """``features[s]`` is ``[B, h_s*w_s, C_s]``; returns ``[B, D, h_1, w_1]``."""
        if len(features) != len(self.projections):
            raise ConfigurationError(f"fusion expects {len(self.projections)} scales, got {len(features)}")
        h1, w1 = grids[0]
        total = None
        for proj, feat, (h, w) in zip(self.projections, features, grids):
            b = feat.shape[0]
            y = proj(feat).reshape(b, h, w, self.dim)
            y = bilinear_resize(y, h1, w1, channels_last=True)
            total = y if total is None else total + y
        b = total.shape[0]
        x = total.reshape(b, h1 * w1, self.dim)
        for block in self.blocks:
            x = block(x)
        return x.reshape(b, h1, w1, self.dim).permute(0, 3, 1, 2)


class Decoder(Module):
    """Linear head on fused features followed by bilinear upsampling."""

    def __init__(self, dim: int, out_channels: int, rng):
        self.head = Linear(dim, out_channels, rng)

    def forward(self, fused: Tensor, out_hw: tuple[int, int]) -> Tensor:
        """``[B, D, h, w]`` -> ``[B, out_channels, H, W]`` logits."""
        y = self.head(fused.permute(0, 2, 3, 1))
        y = bilinear_resize(y, out_hw[0], out_hw[1], channels_last=True)
        return y.permute(0, 3, 1, 2)


class TaskHead(Module):
    def __init__(self, task: TaskSpec, scale_dims: Sequence[int], dim: int, seed: int = 0):
        rng = make_rng(seed, "head", task.id)
        self.fusion = FusionModule(scale_dims, dim, rng)
        self.decoder = Decoder(dim, task.out_channels, rng)

    def forward(self, features, grids, out_hw) -> Tensor:
        return self.decoder(self.fusion(features, grids), out_hw)


def fuse_multiscale(fusion: FusionModule, features, grids) -> Tensor:
    return fusion(features, grids)


def decode(decoder: Decoder, fused: Tensor, out_hw) -> Tensor:
    return decoder(fused, out_hw)
