"""Command-line entry point: ``mtlora <command> [options]``.

Exit codes: 0 success, 1 validation error (bad arguments, config or file
format), 2 runtime error (I/O failure, diverged training, failed check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .audit import FLOPS_CONVENTION, ArchPreset, count_trainable, estimate_flops, get_preset
from .checkpoint import export_merged, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import SyntheticDataset, export_split
from .errors import ConfigurationError, DimensionError, DomainError, FormatError, MTLoRAError, UsageError
from .gradcheck import tiny_model_gradcheck
from .model import STRATEGIES, build_model
from .train import evaluate, train, write_run_report

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-5
U64_MAX = 2**64 - 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=_seed, help="seed for data, initialisation and shuffling")

    parser = _Parser(prog="mtlora", description="Multi-task low-rank adaptation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("train", parents=[common], help="train on the synthetic dataset")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, help="run report JSON path")
    p.add_argument("--checkpoint", type=Path, help="where to save the trained model")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("audit", parents=[common], help="count trainable parameters and FLOPs")
    p.add_argument("--preset", help="named architecture preset, e.g. swin-tiny (default: the config's model)")
    p.add_argument("--strategy", choices=STRATEGIES, default="mtlora")
    p.add_argument("--rank", type=int)
    p.add_argument("--rank-ts", type=int)
    p.add_argument("--tasks", type=int, help="also report FLOPs for this many tasks")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the tiny two-task model")

    p = sub.add_parser("merge", parents=[common], help="fold shared adapters into base weights")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset to disk")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.strategy:
        cfg.strategy = args.strategy
    overrides = {"steps": args.steps, "batch_size": args.batch_size}
    cfg.train = dataclasses.replace(cfg.train, **{k: v for k, v in overrides.items() if v is not None})
    model = build_model(cfg.backbone, cfg.tasks, cfg.strategy, cfg.train.seed, cfg.freeze, cfg.fusion_dim)
    result = train(model, SyntheticDataset(cfg.data, "train"), cfg.train, SyntheticDataset(cfg.data, "val"))
    print(f"strategy={cfg.strategy} steps={cfg.train.steps} final_loss={result.losses[-1]:.6f}")
    _print_metrics(result.report.metrics, result.report.trainable_params)
    if args.out:
        write_run_report(args.out, result, model.cfg, cfg.train)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, SyntheticDataset(cfg.data, "val"))
    _print_metrics(report.metrics, report.trainable_params)
    if args.out:
        args.out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.preset:
        target = get_preset(args.preset)
    else:
        cfg = _run_config(args)
        target = ArchPreset.from_config(cfg.backbone, cfg.tasks, cfg.fusion_dim)
    report = count_trainable(target, args.strategy, r=args.rank, r_ts=args.rank_ts)
    print(report.format())
    payload = report.to_dict()
    if args.tasks:
        flops = {
            mode: [estimate_flops(target, k, mode) for k in range(1, args.tasks + 1)] for mode in ("shared", "individual")
        }
        print(f"# {FLOPS_CONVENTION}")
        for k in range(args.tasks):
            print(f"  k={k + 1}  shared {flops['shared'][k] / 1e9:10.3f} GFLOPs  individual {flops['individual'][k] / 1e9:10.3f} GFLOPs")
        payload["flops"] = flops
    if args.out:
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = tiny_model_gradcheck(seed=args.seed or 0)
    worst = max(errors.values())
    name = max(errors, key=errors.get)
    status = "ok" if worst <= GRADCHECK_TOL else "FAILED"
    print(f"gradcheck {status}: max relative error {worst:.3e} ({name}) over {len(errors)} parameters")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_RUNTIME


def cmd_merge(args) -> int:
    model = load_checkpoint(args.checkpoint)
    export_merged(model, args.out)
    print(f"wrote merged checkpoint {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    overrides = {"n_train": args.n_train, "n_val": args.n_val}
    cfg = dataclasses.replace(_run_config(args).data, **{k: v for k, v in overrides.items() if v is not None})
    for split in ("train", "val"):
        export_split(SyntheticDataset(cfg, split), args.out / split)
    print(f"wrote {cfg.n_train} train and {cfg.n_val} val samples to {args.out}")
    return EXIT_OK


def _print_metrics(metrics: dict[str, float], trainable: int) -> None:
    for task, value in metrics.items():
        print(f"  {task:<10} {value:.4f}")
    print(f"  trainable parameters: {trainable:,d}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "merge": cmd_merge,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UsageError, DimensionError, DomainError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MTLoRAError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
