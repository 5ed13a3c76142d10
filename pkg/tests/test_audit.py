import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlora.audit import (
    GROUPS,
    ArchPreset,
    count_trainable,
    estimate_flops,
    flops_breakdown,
    get_preset,
    live_flops,
    swin_tiny,
)
from mtlora.backbone import BackboneConfig
from mtlora.data import DataConfig, SyntheticDataset
from mtlora.errors import ConfigurationError, UsageError
from mtlora.heads import default_tasks
from mtlora.model import STRATEGIES, FreezePolicy, build_model
from mtlora.train import TrainConfig, make_optimizer, train_step

DESK = BackboneConfig()


def test_preset_shape():
    p = swin_tiny()
    assert p.backbone.embed_dim == 96
    assert p.backbone.depths == (2, 2, 6, 2)
    assert p.backbone.heads == (3, 6, 12, 24)
    assert p.window == 7
    assert get_preset("swin-tiny").name == "swin-tiny"
    with pytest.raises(UsageError):
        get_preset("swin-huge")


def test_unknown_strategy():
    with pytest.raises(UsageError):
        count_trainable("swin-tiny", "prefix_tuning")


def test_shared_delta_per_unit_rank():
    # sum over blocks of 16C: 2*96 + 2*192 + 6*384 + 2*768 = 4416, times 16
    a = count_trainable("swin-tiny", "mtlora", r=1, r_ts=4)
    b = count_trainable("swin-tiny", "mtlora", r=2, r_ts=4)
    assert b.groups["shared_adapters"] - a.groups["shared_adapters"] == 16 * 4416 == 70_656
    assert b.total - a.total == 70_656


def test_patch_merge_freeze_delta():
    on = count_trainable("swin-tiny", "mtlora", r=64)
    frozen = count_trainable("swin-tiny", "mtlora", r=64, policy=FreezePolicy(train_patch_merging=False))
    assert on.total - frozen.total == 8 * (96**2 + 192**2 + 384**2) == 1_548_288


def test_mtlora_plus_swaps_merging_for_low_rank():
    full = count_trainable("swin-tiny", "mtlora", r=8)
    plus = count_trainable("swin-tiny", "mtlora_plus", r=8)
    assert plus.groups["patch_merging"] == 0
    assert plus.groups["shared_adapters"] - full.groups["shared_adapters"] == 8 * 6 * (96 + 192 + 384)


@settings(max_examples=20)
@given(st.integers(1, 32), st.sampled_from(["mtlora", "mtlora_plus", "lora_only"]))
def test_rank_delta_doubling(k, strategy):
    c = {r: count_trainable("swin-tiny", strategy, r=r, r_ts=2).total for r in (k, 2 * k, 4 * k)}
    assert c[4 * k] - c[2 * k] == 2 * (c[2 * k] - c[k])


@settings(max_examples=20)
@given(st.sampled_from(STRATEGIES), st.integers(0, 8), st.integers(0, 4))
def test_groups_sum_to_total(strategy, r, r_ts):
    report = count_trainable(DESK, strategy, r=r, r_ts=r_ts)
    assert list(report.groups) == list(GROUPS)
    assert sum(report.groups.values()) == report.total
    assert all(isinstance(v, int) and v >= 0 for v in report.groups.values())


def test_decoders_only_has_no_backbone_params():
    report = count_trainable(DESK, "decoders_only")
    assert report.total == report.groups["decoders"] > 0
    assert all(v == 0 for g, v in report.groups.items() if g != "decoders")


def test_static_matches_model_enumeration():
    for strategy in STRATEGIES:
        model = build_model(DESK, default_tasks(), strategy)
        assert count_trainable(DESK, strategy).total == model.num_trainable(), strategy


@pytest.fixture(scope="module")
def desk_batch():
    return SyntheticDataset(DataConfig(n_train=2, n_val=0), "train").batch(np.arange(2))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_static_equals_grad_receiving_scalars(strategy, desk_batch):
    model = build_model(DESK, default_tasks(), strategy)
    cfg = TrainConfig(steps=1, batch_size=2)
    train_step(model, desk_batch, cfg, make_optimizer(model, cfg))
    live = sum(p.size for p in model.parameters() if p.grad is not None)
    assert live == count_trainable(DESK, strategy).total


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_static_flops_match_live_counter(k):
    preset = ArchPreset.from_config(DESK)
    model = build_model(DESK, default_tasks()[:k])
    total, scopes = live_flops(model, np.zeros((2, 3, 64, 64), np.float32))
    static = flops_breakdown(preset, k, batch=2)
    assert abs(static.total - total) <= 0.01 * total
    assert static.trunk == scopes["trunk"]
    for t, flops in static.per_task.items():
        assert flops == scopes[f"task:{t}"]


def test_shared_increment_is_per_task_cost():
    preset = ArchPreset.from_config(DESK)
    bd = flops_breakdown(preset, 4)
    ids = [t.id for t in preset.tasks]
    for k in range(1, 5):
        assert estimate_flops(preset, k) - estimate_flops(preset, 1) == sum(bd.per_task[t] for t in ids[1:k])
    assert estimate_flops(preset, 1, "shared") == estimate_flops(preset, 1, "individual")


def test_individual_scales_linearly():
    for target in (swin_tiny(), ArchPreset.from_config(DESK)):
        ratio = estimate_flops(target, 4, "individual") / estimate_flops(target, 1, "individual")
        assert abs(ratio - 4.0) <= 0.02 * 4.0


def test_flops_arguments():
    with pytest.raises(ConfigurationError):
        estimate_flops(DESK, 0)
    with pytest.raises(UsageError):
        estimate_flops(DESK, 1, "batched")


def test_report_format_and_dict():
    report = count_trainable("swin-tiny", "mtlora", r=64)
    text = report.format()
    assert "8.30M" in text and "shared_adapters" in text
    assert report.to_dict()["total"] == report.total
