import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlora.data import (
    DataConfig,
    Scene,
    Shape,
    SyntheticDataset,
    batch_iter,
    decode_sample,
    encode_sample,
    export_split,
    generate_sample,
    read_split,
    render,
)
from mtlora.errors import FormatError
from mtlora.rng import make_rng

SMALL = DataConfig(height=32, width=32, n_train=16, n_val=8)


def check_invariants(s, cfg):
    assert s.image.shape == (3, cfg.height, cfg.width)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    np.testing.assert_array_equal(s.saliency, (s.semseg > 0).astype(np.uint8))
    np.testing.assert_array_equal(s.parts > 0, s.semseg > 0)
    assert s.semseg.max() <= cfg.n_classes and s.parts.max() <= 4
    norms = np.linalg.norm(s.normals.astype(np.float64), axis=0)
    assert np.abs(norms - 1.0).max() <= 1e-4


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_sample_invariants(seed):
    cfg = DataConfig()
    s = generate_sample(make_rng(seed, "prop"), cfg)
    check_invariants(s, cfg)


def test_empty_scene():
    cfg = DataConfig(height=16, width=16)
    s = render(Scene([], noise_seed=3), cfg)
    assert not s.semseg.any() and not s.parts.any() and not s.saliency.any()
    np.testing.assert_array_equal(s.normals[:2], 0.0)
    np.testing.assert_array_equal(s.normals[2], 1.0)


def test_centered_circle_counts():
    cfg = DataConfig(height=32, width=32)
    s = render(Scene([Shape("circle", 1, (16.0, 16.0), 6.0, 0.0)]), cfg)
    ys, xs = np.mgrid[0:32, 0:32] + 0.5
    direct = int(((ys - 16) ** 2 + (xs - 16) ** 2 <= 36).sum())
    assert int(s.saliency.sum()) == int((s.semseg > 0).sum()) == direct
    # quadrants of a centred circle are equal in size
    counts = np.bincount(s.parts.ravel(), minlength=5)[1:]
    assert len(set(counts.tolist())) == 1


def test_normals_tilt_outwards_near_edge():
    cfg = DataConfig(height=32, width=32)
    s = render(Scene([Shape("circle", 1, (16.0, 16.0), 8.0, 0.0)]), cfg)
    # a pixel right of the centre, inside the rim: the gradient of -dist points outwards (+x)
    assert s.normals[0, 16, 22] > 0
    assert s.normals[0, 16, 9] < 0
    assert math.isclose(float(s.normals[2, 16, 16]), 1.0, abs_tol=0.5)


def test_same_seed_bit_identical():
    a = generate_sample(make_rng(11, "x"))
    b = generate_sample(make_rng(11, "x"))
    for name in ("image", "semseg", "parts", "saliency", "normals"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_small_canvas_rejected():
    with pytest.raises(ValueError):
        generate_sample(make_rng(0), DataConfig(height=15, width=64))


def test_splits_disjoint():
    train = SyntheticDataset(SMALL, "train")
    val = SyntheticDataset(SMALL, "val")
    train_bytes = {s.image.tobytes() for s in train.samples}
    assert not any(s.image.tobytes() in train_bytes for s in val.samples)


def test_batch_count_and_order():
    cfg = DataConfig(height=16, width=16, n_train=512, n_val=0, max_shapes=1)
    ds = SyntheticDataset(cfg, "train")
    batches = list(batch_iter(ds, 8, seed=5, epoch=0))
    assert len(batches) == 64 and all(len(b) == 8 for b in batches)
    again = list(batch_iter(ds, 8, seed=5, epoch=0))
    assert all(np.array_equal(a.images, b.images) for a, b in zip(batches, again))
    assert not np.array_equal(ds.epoch_order(5, 0), ds.epoch_order(5, 1))


def test_class_balance():
    ds = SyntheticDataset(DataConfig(n_train=512, n_val=0), "train")
    present = np.array([[np.any(s.semseg == k) for k in (1, 2, 3)] for s in ds.samples])
    assert (present.mean(axis=0) >= 0.05).all()


def test_mtds_roundtrip(tmp_path):
    ds = SyntheticDataset(SMALL, "val")
    export_split(ds, tmp_path / "val")
    back = read_split(tmp_path / "val")
    assert len(back) == len(ds)
    for a, b in zip(ds.samples, back):
        for name in ("image", "semseg", "parts", "saliency", "normals"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_mtds_header_layout():
    s = generate_sample(make_rng(0), DataConfig(height=16, width=20))
    buf = encode_sample(s)
    assert buf[:4] == b"MTDS"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:10], "little") == 16
    assert int.from_bytes(buf[10:14], "little") == 20
    assert len(buf) == 14 + 16 * 20 * (3 * 4 + 1 + 1 + 1 + 3 * 4)


def test_mtds_rejects_corruption():
    buf = encode_sample(generate_sample(make_rng(0), DataConfig(height=16, width=16)))
    with pytest.raises(FormatError):
        decode_sample(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_sample(buf + b"\x00")
    with pytest.raises(FormatError):
        decode_sample(buf[:4] + (2).to_bytes(2, "little") + buf[6:])


def test_export_deterministic(tmp_path):
    for d in ("a", "b"):
        export_split(SyntheticDataset(SMALL, "train"), tmp_path / d)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_mtds_truncated():
    buf = encode_sample(generate_sample(make_rng(0), DataConfig(height=16, width=16)))
    for cut in (3, 20, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_sample(buf[:cut])
