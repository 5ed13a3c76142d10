"""Full multi-task model, fine-tuning strategies and freeze policies."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, StageOutput
from .errors import ConfigurationError, UsageError
from .heads import TaskHead, TaskSpec
from .lora import MTLoRALinear
from .nn import Module
from .tensor import Parameter, Tensor, flop_scope

STRATEGIES = ("mtlora", "mtlora_plus", "lora_only", "decoders_only", "full_ft")


@dataclass(frozen=True)
class FreezePolicy:
    """Which non-adapter parameter groups stay trainable.

    Adapters, fusion modules and decoders are always trainable.  Base linear
    weights are frozen unless ``train_base_weights`` is set, which only the
    full fine-tuning baselines do.
    """

    train_patch_embed: bool = True
    train_patch_merging: bool = True
    train_layer_norm: bool = True
    train_position_bias: bool = True
    train_biases: bool = False
    train_base_weights: bool = False

    def trainable(self, role: str) -> bool:
        return {
            "lora_shared": True,
            "lora_task": True,
            "head": True,
            "weight": self.train_base_weights,
            "bias": self.train_biases,
            "layer_norm": self.train_layer_norm,
            "position_bias": self.train_position_bias,
            "patch_embed": self.train_patch_embed,
            "patch_merge": self.train_patch_merging,
        }[role]

    def apply(self, model: Module) -> None:
        for p in model.parameters():
            p.trainable = self.trainable(p.role)


def strategy_setup(cfg: BackboneConfig, strategy: str, policy: FreezePolicy | None = None):
    """Return the backbone config and freeze policy a strategy implies."""
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    policy = policy or FreezePolicy()
    if strategy == "mtlora":
        cfg = dataclasses.replace(cfg, patch_merge_mode="unfrozen")
    elif strategy == "mtlora_plus":
        cfg = dataclasses.replace(cfg, patch_merge_mode="lora")
        policy = dataclasses.replace(policy, train_patch_merging=False)
    elif strategy == "lora_only":
        cfg = dataclasses.replace(cfg, r_ts=0)
    elif strategy == "decoders_only":
        cfg = dataclasses.replace(cfg, r_shared=0, r_ts=0, patch_merge_mode="frozen")
        policy = FreezePolicy(False, False, False, False, False, False)
    else:
        cfg = dataclasses.replace(cfg, r_shared=0, r_ts=0, patch_merge_mode="unfrozen")
        policy = FreezePolicy(True, True, True, True, True, True)
    return cfg, policy


class MTLModel(Module):
    """Shared backbone plus one fusion module and decoder per task."""

    def __init__(self, cfg: BackboneConfig, tasks: Sequence[TaskSpec], seed: int = 0, fusion_dim: int | None = None):
        ids = [t.id for t in tasks]
        if len(set(ids)) != len(ids) or not ids:
            raise ConfigurationError("task ids must be unique and non-empty")
        self.cfg = cfg
        self.task_specs = {t.id: t for t in sorted(tasks, key=lambda t: t.id)}
        self.backbone = Backbone(cfg, ids, seed)
        dims = [cfg.stage_dim(s) for s in range(cfg.num_stages)]
        self.fusion_dim = fusion_dim or cfg.embed_dim
        self.heads = {t: TaskHead(spec, dims, self.fusion_dim, seed) for t, spec in self.task_specs.items()}
        self.assign_names()
        self._apply_alpha_overrides()

    @property
    def tasks(self) -> list[str]:
        return list(self.task_specs)

    def _apply_alpha_overrides(self) -> None:
        layers = dict(self.named_modules())
        for path, alpha in self.cfg.alpha_overrides.items():
            layer = layers.get(path)
            if not isinstance(layer, MTLoRALinear):
                raise ConfigurationError(f"alpha override names no adapted layer: {path!r}")
            layer.set_alpha(alpha)

    def lora_layers(self) -> list[MTLoRALinear]:
        return self.backbone.lora_layers()

    def set_alpha(self, alpha: float) -> None:
        for layer in self.lora_layers():
            layer.set_alpha(alpha)

    def features(self, images) -> list[StageOutput]:
        return self.backbone(self._as_tensor(images))

    def forward(self, images) -> dict[str, Tensor]:
        """Logits ``[B, C_task, H, W]`` for every task from one backbone pass."""
        x = self._as_tensor(images)
        out_hw = x.shape[-2:]
        stages = self.backbone(x)
        grids = [s.grid for s in stages]
        outputs = {}
        for t, head in self.heads.items():
            with flop_scope(f"task:{t}"):
                outputs[t] = head([s.per_task[t] for s in stages], grids, out_hw)
        return outputs

    def _as_tensor(self, images) -> Tensor:
        dtype = self.backbone.patch_embed.proj.weight.dtype
        if isinstance(images, Tensor):
            return images
        arr = np.asarray(images, dtype=dtype)
        return Tensor(arr[None] if arr.ndim == 3 else arr, dtype=dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable_parameters())


def build_model(
    cfg: BackboneConfig,
    tasks: Sequence[TaskSpec],
    strategy: str = "mtlora",
    seed: int = 0,
    policy: FreezePolicy | None = None,
    fusion_dim: int | None = None,
) -> MTLModel:
    cfg, policy = strategy_setup(cfg, strategy, policy)
    model = MTLModel(cfg, tasks, seed, fusion_dim)
    policy.apply(model)
    model.strategy = strategy
    model.policy = policy
    return model


def parameter_groups(model: Module) -> dict[str, list[Parameter]]:
    groups: dict[str, list[Parameter]] = {}
    for p in model.parameters():
        groups.setdefault(p.role, []).append(p)
    return groups
