"""Training loop, optimizer, evaluation and run reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backbone import BackboneConfig
from .data import DataConfig, SyntheticDataset, infinite_batches
from .errors import ConfigurationError, NonFiniteLossError, UsageError
from .heads import TaskSpec
from .losses import mtl_loss, task_loss
from .metrics import angular_rmse, confusion, delta_m, miou_from_confusion
from .model import MTLModel, build_model
from .tensor import Parameter, backward, clear_tape, no_grad


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    task_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if not self.lr >= 0:
            raise ConfigurationError("lr must be non-negative")
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")

    def weights_for(self, tasks: Sequence[TaskSpec]) -> dict[str, float]:
        """Explicit weights override each task's own default weight."""
        return {t.id: float(self.task_weights.get(t.id, t.weight)) for t in tasks}


class Adam:
    """Adam with bias correction; weight decay is added to the gradient as L2."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.trainable:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.lr == 0:
                continue
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(c2)
            denom += self.eps
            step = m / denom
            step *= self.lr / c1
            p.data -= step


def make_optimizer(model: MTLModel, cfg: TrainConfig) -> Adam:
    return Adam(model.trainable_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)


def compute_losses(model: MTLModel, images, targets: Mapping[str, np.ndarray]):
    outputs = model(images)
    return {t: task_loss(model.task_specs[t], outputs[t], targets[t]) for t in outputs}


def train_step(model: MTLModel, batch, cfg: TrainConfig, optimizer: Adam) -> float:
    """One forward over all tasks, one backward, one optimizer update."""
    model.zero_grad()
    losses = compute_losses(model, batch.images, batch.targets)
    for t, loss in losses.items():
        value = loss.item()
        if not math.isfinite(value):
            clear_tape()
            raise NonFiniteLossError(t, value)
    total = mtl_loss(losses, cfg.weights_for(model.task_specs.values()))
    backward(total)
    optimizer.step()
    return total.item()


# -- evaluation --------------------------------------------------------------


@dataclass
class MetricReport:
    metrics: dict[str, float]
    trainable_params: int
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: MTLModel, images) -> dict[str, np.ndarray]:
    with no_grad():
        return {t: v.data for t, v in model(images).items()}


def task_prediction(task: TaskSpec, logits: np.ndarray) -> np.ndarray:
    if task.metric_kind == "angular_rmse":
        return logits
    if task.loss_kind == "balanced_bce":
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def evaluate(model: MTLModel, dataset: SyntheticDataset, batch_size: int = 32, steps: int = 0) -> MetricReport:
    """mIoU over the whole split for label tasks, angular rmse for normals."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty split")
    confs = {t: np.zeros((s.num_classes, s.num_classes), dtype=np.int64) for t, s in model.task_specs.items()}
    sq_err = {t: 0.0 for t in model.task_specs}
    count = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        logits = predict(model, batch.images)
        for t, spec in model.task_specs.items():
            pred = task_prediction(spec, logits[t])
            if spec.metric_kind == "miou":
                confs[t] += confusion(pred, batch.targets[t], spec.num_classes)
            else:
                sq_err[t] += angular_rmse(pred, batch.targets[t]) ** 2 * pred[:, 0].size
        count += batch.images.shape[0] * batch.images.shape[2] * batch.images.shape[3]
    metrics = {}
    for t, spec in model.task_specs.items():
        metrics[t] = miou_from_confusion(confs[t]) if spec.metric_kind == "miou" else math.sqrt(sq_err[t] / count)
    trainable = getattr(model, "trainable_budget", None) or model.num_trainable()
    return MetricReport(metrics, trainable, steps)


# -- runs --------------------------------------------------------------------


@dataclass
class RunResult:
    strategy: str
    losses: list[float]
    report: MetricReport
    model: MTLModel | None = None


def train(model: MTLModel, train_set: SyntheticDataset, cfg: TrainConfig, val_set: SyntheticDataset | None = None) -> RunResult:
    optimizer = make_optimizer(model, cfg)
    batches = infinite_batches(train_set, cfg.batch_size, cfg.seed)
    losses = [train_step(model, next(batches), cfg, optimizer) for _ in range(cfg.steps)]
    report = evaluate(model, val_set, steps=cfg.steps) if val_set is not None else None
    return RunResult(getattr(model, "strategy", ""), losses, report, model)


def run_strategy(
    strategy: str,
    backbone_cfg: BackboneConfig,
    tasks: Sequence[TaskSpec],
    train_cfg: TrainConfig,
    train_set: SyntheticDataset,
    val_set: SyntheticDataset,
    model_seed: int = 0,
    fusion_dim: int | None = None,
) -> RunResult:
    model = build_model(backbone_cfg, tasks, strategy, seed=model_seed, fusion_dim=fusion_dim)
    return train(model, train_set, train_cfg, val_set)


def single_task_baselines(backbone_cfg, tasks, train_cfg, train_set, val_set, model_seed=0, fusion_dim=None):
    """Fully fine-tuned one-task models with the same backbone and step budget."""
    out = {}
    for spec in tasks:
        res = run_strategy("full_ft", backbone_cfg, [spec], train_cfg, train_set, val_set, model_seed, fusion_dim)
        out[spec.id] = res.report.metrics[spec.id]
    return out


def delta_m_report(report: MetricReport, baselines: Mapping[str, float], tasks: Sequence[TaskSpec]) -> float:
    ids = sorted(t.id for t in tasks)
    flags = {t.id: t.lower_is_better for t in tasks}
    return delta_m([report.metrics[t] for t in ids], [baselines[t] for t in ids], [flags[t] for t in ids])


@dataclass
class DeskBenchmark:
    baselines: dict[str, float]
    runs: dict[str, RunResult]
    delta: dict[str, float]


def desk_benchmark(
    strategies: Sequence[str] = ("mtlora", "decoders_only"),
    backbone_cfg: BackboneConfig | None = None,
    tasks: Sequence[TaskSpec] | None = None,
    train_cfg: TrainConfig | None = None,
    data_cfg: DataConfig | None = None,
) -> DeskBenchmark:
    """Train each strategy plus the single-task baselines and score them by delta-m."""
    from .heads import default_tasks

    backbone_cfg = backbone_cfg or BackboneConfig()
    tasks = list(tasks or default_tasks())
    train_cfg = train_cfg or TrainConfig()
    data_cfg = data_cfg or DataConfig()
    train_set = SyntheticDataset(data_cfg, "train")
    val_set = SyntheticDataset(data_cfg, "val")
    seed = train_cfg.seed
    baselines = single_task_baselines(backbone_cfg, tasks, train_cfg, train_set, val_set, seed)
    runs = {s: run_strategy(s, backbone_cfg, tasks, train_cfg, train_set, val_set, seed) for s in strategies}
    delta = {s: delta_m_report(r.report, baselines, tasks) for s, r in runs.items()}
    return DeskBenchmark(baselines, runs, delta)


def write_run_report(
    path,
    result: RunResult,
    backbone_cfg: BackboneConfig,
    train_cfg: TrainConfig,
    baselines: Mapping[str, float] | None = None,
    tasks: Sequence[TaskSpec] | None = None,
) -> Path:
    """JSON run report: config echo, per-step losses, metrics, optional delta-m."""
    payload = {
        "strategy": result.strategy,
        "config": {"backbone": asdict(backbone_cfg), "train": asdict(train_cfg)},
        "losses": result.losses,
        "report": result.report.to_dict() if result.report else None,
    }
    if baselines is not None and result.report is not None and tasks is not None:
        payload["baselines"] = dict(baselines)
        payload["delta_m"] = delta_m_report(result.report, baselines, tasks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
