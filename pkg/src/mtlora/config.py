"""TOML run configuration.

Sections: ``[backbone]`` (encoder shape), ``[adapters]`` (ranks, scale,
locations, patch-merge mode, per-layer alpha overrides), ``[tasks.<id>]``,
``[train]`` (optimizer, steps, strategy), ``[freeze]`` (FreezePolicy flags)
and ``[data]`` (synthetic dataset size).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import BackboneConfig
from .data import DataConfig
from .errors import ConfigurationError
from .heads import TaskSpec, default_tasks
from .model import STRATEGIES, FreezePolicy
from .train import TrainConfig

BACKBONE_KEYS = {"in_channels", "patch_size", "embed_dim", "depths", "heads", "mlp_ratio", "image_size", "fusion_dim"}
ADAPTER_KEYS = {"r_shared", "r_ts", "alpha", "locations", "patch_merge_mode", "ts_on_qkv", "alpha_overrides"}
TASK_KEYS = {"out_channels", "loss", "metric", "weight"}
TRAIN_KEYS = {"strategy", "optimizer", "lr", "betas", "eps", "weight_decay", "steps", "batch_size", "seed"}
SECTIONS = {"backbone", "adapters", "tasks", "train", "freeze", "data"}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tasks: list[TaskSpec] = field(default_factory=default_tasks)
    train: TrainConfig = field(default_factory=TrainConfig)
    freeze: FreezePolicy | None = None
    data: DataConfig = field(default_factory=DataConfig)
    strategy: str = "mtlora"
    fusion_dim: int | None = None

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
        )


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigurationError(f"[{section}] has unknown keys {sorted(unknown)}")


def parse_config(doc: dict) -> RunConfig:
    _check_keys("top level", doc, SECTIONS)
    bb = dict(doc.get("backbone", {}))
    _check_keys("backbone", bb, BACKBONE_KEYS)
    fusion_dim = bb.pop("fusion_dim", None)
    ad = dict(doc.get("adapters", {}))
    _check_keys("adapters", ad, ADAPTER_KEYS)
    if "locations" in ad:
        ad["adapt_locations"] = tuple(ad.pop("locations"))
    backbone = BackboneConfig(**bb, **ad)
    backbone.validate()

    tasks = default_tasks()
    if "tasks" in doc:
        tasks = []
        for tid, spec in sorted(doc["tasks"].items()):
            _check_keys(f"tasks.{tid}", spec, TASK_KEYS)
            try:
                tasks.append(TaskSpec(tid, int(spec["out_channels"]), spec["loss"], spec["metric"], float(spec.get("weight", 1.0))))
            except KeyError as exc:
                raise ConfigurationError(f"[tasks.{tid}] is missing {exc.args[0]!r}") from None

    tr = dict(doc.get("train", {}))
    _check_keys("train", tr, TRAIN_KEYS)
    strategy = tr.pop("strategy", "mtlora")
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if "betas" in tr:
        tr["betas"] = tuple(tr["betas"])
    weights = {t.id: t.weight for t in tasks}
    train = TrainConfig(**tr, task_weights=weights)

    freeze = None
    if "freeze" in doc:
        allowed = {f.name for f in dataclasses.fields(FreezePolicy)}
        _check_keys("freeze", doc["freeze"], allowed)
        freeze = FreezePolicy(**doc["freeze"])

    dt = doc.get("data", {})
    _check_keys("data", dt, {f.name for f in dataclasses.fields(DataConfig)})
    data = DataConfig(**dt)
    return RunConfig(backbone, tasks, train, freeze, data, strategy, fusion_dim)


def load_config(path) -> RunConfig:
    try:
        with open(Path(path), "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    try:
        return parse_config(doc)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
