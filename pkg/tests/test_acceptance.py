"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6, 8 and 9 share the desk benchmark, which criterion 9 trains twice
(about 20 minutes per run on one CPU core).
"""

import dataclasses

import numpy as np
import pytest

from mtlora.audit import ArchPreset, count_trainable, estimate_flops, flops_breakdown, live_flops, swin_tiny
from mtlora.backbone import BackboneConfig
from mtlora.checkpoint import export_merged, load_checkpoint
from mtlora.data import DataConfig, SyntheticDataset
from mtlora.gradcheck import tiny_model_gradcheck
from mtlora.heads import default_tasks
from mtlora.losses import mtl_loss
from mtlora.metrics import delta_m
from mtlora.model import FreezePolicy, MTLModel, build_model
from mtlora.tensor import backward, clear_tape, no_grad
from mtlora.train import TrainConfig, compute_losses, desk_benchmark

DESK = BackboneConfig()
TASKS = default_tasks()


def within(value, target, tol):
    return abs(value - target) <= tol


# -- desk benchmark shared by criteria 6, 8 and 9 ------------------------

BENCH_TRAIN = TrainConfig(steps=2000, batch_size=4, seed=0)
BENCH_DATA = DataConfig(height=64, width=64, n_train=512, n_val=128, seed=0)


@pytest.fixture(scope="module")
def bench_runs():
    cache = []

    def get(i):
        while len(cache) <= i:
            cache.append(desk_benchmark(("mtlora", "decoders_only"), DESK, TASKS, BENCH_TRAIN, BENCH_DATA))
        return cache[i]

    return get


# -- 1 -----------------------------------------------------------------------

BASELINE = (67.21, 61.93, 62.35, 17.97)
FLAGS = (False, False, False, True)
ROWS = {
    "decoders only": ((65.09, 53.48, 57.46, 20.69), -9.95),
    "mtlora r=64": ((67.9, 59.84, 65.40, 16.60), 2.55),
    "full fine tuning": ((67.56, 60.24, 65.21, 16.64), 2.23),
}


def test_criterion_1_delta_m_rows(criterion):
    with criterion(1, "delta-m matches reference rows within 0.25") as c:
        for name, (metrics, reference) in ROWS.items():
            value = delta_m(metrics, BASELINE, FLAGS)
            c.note(f"{name} {value:+.3f} vs {reference:+.2f}")
            assert within(value, reference, 0.25)


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_parameter_audit(criterion):
    with criterion(2, "swin-tiny parameter audit") as c:
        total = {r: count_trainable("swin-tiny", "mtlora", r=r).total for r in (16, 32, 64)}
        d64, d32 = total[64] - total[32], total[32] - total[16]
        frozen = count_trainable("swin-tiny", "mtlora", r=64, policy=FreezePolicy(train_patch_merging=False)).total
        c.note(f"delta64-32={d64:,} delta32-16={d32:,} merge-freeze={total[64] - frozen:,}")
        c.note("totals " + ", ".join(f"r{r}={t / 1e6:.2f}M" for r, t in total.items()))
        assert within(d64, 2_260_992, 0.01 * 2_260_992)
        assert within(d32, 1_130_496, 0.01 * 1_130_496)
        assert within(total[64] - frozen, 1_548_288, 0.01 * 1_548_288)
        for r, reference in ((16, 4.95e6), (32, 6.08e6), (64, 8.34e6)):
            assert within(total[r], reference, 0.10 * reference)


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_flops_scaling(criterion):
    with criterion(3, "FLOPs scaling and live-counter agreement") as c:
        preset = swin_tiny()
        ratio = estimate_flops(preset, 4, "individual") / estimate_flops(preset, 1, "individual")
        c.note(f"individual(4)/individual(1)={ratio:.4f}")
        assert within(ratio, 4.0, 0.02 * 4.0)

        desk = ArchPreset.from_config(DESK)
        increment = estimate_flops(desk, 4) - estimate_flops(desk, 1)
        first = flops_breakdown(desk, 1).per_task[TASKS[0].id]
        c.note(f"shared(4)-shared(1)={increment:,} vs 3x per-task={3 * first:,}")
        assert within(increment, 3 * first, 0.01 * 3 * first)

        images = np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32)
        live_task = {}
        worst = 0.0
        for k in range(1, 5):
            total, scopes = live_flops(build_model(DESK, TASKS[:k]), images)
            static = estimate_flops(desk, k)
            worst = max(worst, abs(static - total) / total)
            live_task.update({s: v for s, v in scopes.items() if s.startswith("task:")})
        live_increment = sum(live_task[f"task:{t.id}"] for t in TASKS[1:])
        c.note(f"static vs live max rel diff={worst:.2e}; live increment={live_increment:,}")
        assert worst <= 0.01
        assert within(increment, live_increment, 0.01 * live_increment)


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_gradient_check(criterion):
    with criterion(4, "tiny-model gradient check") as c:
        errors = tiny_model_gradcheck()
        name = max(errors, key=errors.get)
        c.note(f"max rel err {errors[name]:.2e} ({name}) over {len(errors)} params")
        assert errors[name] <= 1e-5


# -- 5 -----------------------------------------------------------------------

SMALL = BackboneConfig(embed_dim=8, depths=(1, 2), heads=(2, 2), image_size=16, r_shared=2, r_ts=2)


def _perturbed(cfg, seed=0):
    model = build_model(cfg, TASKS, seed=seed)
    rng = np.random.default_rng(seed)
    for n, p in model.named_parameters():
        if n.endswith(".B"):
            p.data[...] = rng.normal(0, 0.2, p.shape)
    return model


def _task_grads(model, task):
    return [p.grad for n, p in model.named_parameters() if f".task_adapters.{task}." in n]


def test_criterion_5_gradient_isolation(criterion):
    with criterion(5, "task-adapter gradient isolation") as c:
        model = _perturbed(SMALL)
        batch = SyntheticDataset(DataConfig(height=16, width=16, n_train=4, n_val=0), "train").batch(np.arange(4))
        ids = [t.id for t in TASKS]
        for j in ids:
            model.zero_grad()
            backward(compute_losses(model, batch.images, batch.targets)[j])
            assert any(g is not None and g.any() for g in _task_grads(model, j))
            for k in ids:
                if k != j:
                    assert all(g is None or not g.any() for g in _task_grads(model, k))
            model.zero_grad()
            weights = {t: 0.0 if t == j else 1.0 for t in ids}
            backward(mtl_loss(compute_losses(model, batch.images, batch.targets), weights))
            assert all(g is not None and not g.any() for g in _task_grads(model, j))
        clear_tape()
        c.note(f"checked {len(ids)} single-task losses and {len(ids)} zero-weight runs")


# -- 6 -----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_merge_equivalence(criterion, tmp_path, bench_runs):
    with criterion(6, "merged checkpoint equivalence") as c:
        x = np.random.default_rng(6).uniform(size=(100, 3, 64, 64)).astype(np.float32)
        base = MTLModel(dataclasses.replace(DESK, r_shared=0, r_ts=0), TASKS, seed=2)
        with no_grad():
            ref = base(x[:4])
            zero_init = build_model(DESK, TASKS, seed=2)
            export_merged(zero_init, tmp_path / "zero.mtlr")
            for variant in (zero_init, load_checkpoint(tmp_path / "zero.mtlr")):
                out = variant(x[:4])
                assert all(out[t].data.tobytes() == ref[t].data.tobytes() for t in ref)
            perturbed = _perturbed(DESK, seed=2)
            perturbed.set_alpha(0.0)
            export_merged(perturbed, tmp_path / "alpha0.mtlr")
            for variant in (perturbed, load_checkpoint(tmp_path / "alpha0.mtlr")):
                out = variant(x[:4])
                assert all(out[t].data.tobytes() == ref[t].data.tobytes() for t in ref)
        c.note("alpha=0 and zero-init match the frozen base bitwise")

        model = bench_runs(0).runs["mtlora"].model
        export_merged(model, tmp_path / "merged.mtlr")
        merged = load_checkpoint(tmp_path / "merged.mtlr")
        diff = dict.fromkeys(model.tasks, 0.0)
        scale = dict.fromkeys(model.tasks, 0.0)
        with no_grad():
            for s in range(0, 100, 20):
                a, b = model(x[s : s + 20]), merged(x[s : s + 20])
                for t in a:
                    diff[t] = max(diff[t], float(np.abs(a[t].data - b[t].data).max()))
                    scale[t] = max(scale[t], float(np.abs(a[t].data).max()))
        worst = max(diff.values())
        per_task = ", ".join(
            f"{t} {diff[t]:.1e} (|out| {scale[t]:.3g}, ulp {np.spacing(np.float32(scale[t])):.1e})" for t in sorted(diff)
        )
        c.note(f"trained desk model, max abs diff over 100 inputs {worst:.2e}: {per_task}")
        assert worst <= 1e-5



# -- 7 -----------------------------------------------------------------------


def test_criterion_7_zero_init_transparency(criterion):
    with criterion(7, "zero-init transparency") as c:
        model = build_model(DESK, TASKS, seed=5)
        base = MTLModel(dataclasses.replace(DESK, r_shared=0, r_ts=0), TASKS, seed=5)
        x = np.random.default_rng(7).uniform(size=(2, 3, 64, 64)).astype(np.float32)
        with no_grad():
            stages = model.features(x)
            for s in stages:
                for t in model.tasks:
                    assert s.per_task[t].data.tobytes() == s.shared.data.tobytes()
            out, ref = model(x), base(x)
        assert all(out[t].data.tobytes() == ref[t].data.tobytes() for t in ref)
        c.note(f"{len(stages)} stages x {len(model.tasks)} tasks bitwise equal; outputs equal base")


# -- 8, 9 --------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_desk_training(criterion, bench_runs):
    with criterion(8, "desk-scale training: mtlora beats decoders-only, decoders-only below baselines") as c:
        bench = bench_runs(0)
        c.note(f"delta-m mtlora {bench.delta['mtlora']:+.2f}, decoders_only {bench.delta['decoders_only']:+.2f}")
        assert bench.delta["mtlora"] > bench.delta["decoders_only"]
        assert bench.delta["decoders_only"] < 0


@pytest.mark.slow
def test_criterion_9_determinism(criterion, bench_runs):
    with criterion(9, "desk benchmark is deterministic") as c:
        a, b = bench_runs(0), bench_runs(1)
        assert a.baselines == b.baselines
        for s in a.runs:
            assert a.runs[s].losses == b.runs[s].losses
            assert a.runs[s].report == b.runs[s].report
        c.note("identical loss curves and metric reports across two runs")
