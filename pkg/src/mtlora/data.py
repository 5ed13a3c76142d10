"""Procedural four-task dense prediction dataset.

Scenes hold 1-4 shapes (circle, rectangle, triangle; class id = kind + 1)
over smoothed colour noise.  Labels are derived from the same geometry so the
tasks are correlated: saliency is the foreground of the semantic map, parts
split each shape into quadrants of its own frame, and normals come from the
shape's signed distance field.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .rng import Rng, make_rng

KINDS = ("circle", "rectangle", "triangle")
VAL_OFFSET = 1 << 31
MAGIC = b"MTDS"
VERSION = 1
# (name, channels, dtype) in file order
BLOCKS = (
    ("image", 3, "<f4"),
    ("semseg", 1, "u1"),
    ("parts", 1, "u1"),
    ("saliency", 1, "u1"),
    ("normals", 3, "<f4"),
)
_RECT_ASPECT = 0.6


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    max_shapes: int = 4
    n_train: int = 512
    n_val: int = 128
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(KINDS)


@dataclass
class Shape:
    kind: str
    class_id: int
    center: tuple[float, float]
    size: float
    rotation: float

    @property
    def bounding_radius(self) -> float:
        if self.kind == "rectangle":
            return self.size * math.hypot(1.0, _RECT_ASPECT)
        return self.size


@dataclass
class Scene:
    shapes: list[Shape] = field(default_factory=list)
    noise_seed: int = 0


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    semseg: np.ndarray  # [H, W] uint8, 0 = background
    parts: np.ndarray  # [H, W] uint8, 0 = background, 1..4 quadrant
    saliency: np.ndarray  # [H, W] uint8 in {0, 1}
    normals: np.ndarray  # [3, H, W] float32 unit vectors


def random_scene(rng: Rng, cfg: DataConfig) -> Scene:
    h, w = cfg.height, cfg.width
    n = int(rng.integers(1, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n):
        k = int(rng.integers(0, len(KINDS)))
        size = float(rng.uniform(0.12, 0.25) * min(h, w))
        shape = Shape(KINDS[k], k + 1, (0.0, 0.0), size, float(rng.uniform(0.0, 2 * math.pi)))
        m = shape.bounding_radius
        shape.center = (float(rng.uniform(m, h - m)), float(rng.uniform(m, w - m)))
        shapes.append(shape)
    return Scene(shapes, int(rng.integers(0, 2**31)))


def _local_coords(shape: Shape, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = ys - shape.center[0], xs - shape.center[1]
    c, s = math.cos(shape.rotation), math.sin(shape.rotation)
    return c * dx + s * dy, -s * dx + c * dy


def shape_mask(shape: Shape, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = shape.size
    if shape.kind == "circle":
        return u * u + v * v <= r * r
    if shape.kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= _RECT_ASPECT * r)
    # equilateral triangle with circumradius r: three half-planes at the inradius
    inside = np.ones(u.shape, dtype=bool)
    for angle in (-90.0, 30.0, 150.0):
        a = math.radians(angle)
        inside &= u * math.cos(a) + v * math.sin(a) <= r / 2
    return inside


def render(scene: Scene, cfg: DataConfig) -> Sample:
    h, w = cfg.height, cfg.width
    noise_rng = make_rng(scene.noise_seed, "noise")
    noise = ndimage.gaussian_filter(noise_rng.normal(size=(3, h, w)), sigma=(0, 2, 2))
    image = np.clip(0.5 + 0.6 * noise, 0.0, 1.0)
    semseg = np.zeros((h, w), dtype=np.uint8)
    parts = np.zeros((h, w), dtype=np.uint8)
    normals = np.zeros((3, h, w), dtype=np.float64)
    normals[2] = 1.0
    for shape in scene.shapes:
        u, v = _local_coords(shape, h, w)
        mask = shape_mask(shape, u, v)
        if not mask.any():
            continue
        colour = noise_rng.uniform(0.0, 1.0, size=3)
        texture = 0.05 * noise_rng.normal(size=(3, h, w))
        image = np.where(mask, np.clip(colour[:, None, None] + texture, 0.0, 1.0), image)
        semseg[mask] = shape.class_id
        quadrant = 1 + (u >= 0).astype(np.uint8) + 2 * (v >= 0).astype(np.uint8)
        parts[mask] = quadrant[mask]
        sdf = -ndimage.distance_transform_edt(mask)
        gy, gx = np.gradient(sdf)
        n = np.stack([gx, gy, np.ones_like(gx)])
        n /= np.linalg.norm(n, axis=0, keepdims=True)
        normals[:, mask] = n[:, mask]
    return Sample(
        image=image.astype(np.float32),
        semseg=semseg,
        parts=parts,
        saliency=(semseg > 0).astype(np.uint8),
        normals=normals.astype(np.float32),
    )


def generate_sample(rng: Rng, cfg: DataConfig | None = None) -> Sample:
    cfg = cfg or DataConfig()
    if cfg.height < 16 or cfg.width < 16:
        raise ValueError("canvas must be at least 16x16")
    return render(random_scene(rng, cfg), cfg)


def sample_seed_index(split: str, index: int) -> int:
    if split == "train":
        return index
    if split == "val":
        return VAL_OFFSET + index
    raise ValueError(f"unknown split {split!r}")


def _stack(arrays, shape, dtype) -> np.ndarray:
    return np.stack(arrays) if arrays else np.zeros((0, *shape), dtype=dtype)


@dataclass
class Batch:
    images: np.ndarray
    targets: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.images)


class SyntheticDataset:
    """A fully materialised split; sample ``i`` depends only on (seed, split, i)."""

    def __init__(self, cfg: DataConfig, split: str):
        self.cfg = cfg
        self.split = split
        n = cfg.n_train if split == "train" else cfg.n_val
        self.samples = [generate_sample(make_rng(cfg.seed, "sample", sample_seed_index(split, i)), cfg) for i in range(n)]
        h, w = cfg.height, cfg.width
        self.images = _stack([s.image for s in self.samples], (3, h, w), np.float32)
        self.targets = {
            name: _stack([getattr(s, name) for s in self.samples], (c, h, w) if c > 1 else (h, w), np.dtype(dt))
            for name, c, dt in BLOCKS[1:]
        }

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices)
        return Batch(self.images[idx], {k: v[idx] for k, v in self.targets.items()})

    def epoch_order(self, seed: int | None, epoch: int) -> np.ndarray:
        if seed is None:
            return np.arange(len(self))
        return make_rng(seed, "epoch", epoch).permutation(len(self))


def batch_iter(dataset: SyntheticDataset, batch_size: int, seed: int | None = None, epoch: int = 0) -> Iterator[Batch]:
    """Batches of one epoch; shuffled by ``(seed, epoch)`` unless ``seed`` is None."""
    order = dataset.epoch_order(seed, epoch)
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start : start + batch_size])


def infinite_batches(dataset: SyntheticDataset, batch_size: int, seed: int) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from batch_iter(dataset, batch_size, seed, epoch)
        epoch += 1


# -- on-disk export ---------------------------------------------------------


def encode_sample(sample: Sample) -> bytes:
    h, w = sample.semseg.shape
    out = [MAGIC, struct.pack("<HII", VERSION, h, w)]
    for name, _, dtype in BLOCKS:
        out.append(np.ascontiguousarray(getattr(sample, name), dtype=dtype).tobytes())
    return b"".join(out)


def decode_sample(buf: bytes) -> Sample:
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise FormatError("not an MTDS sample (bad magic)")
    version, h, w = struct.unpack_from("<HII", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MTDS version {version}")
    offset = 4 + struct.calcsize("<HII")
    fields = {}
    for name, channels, dtype in BLOCKS:
        count = channels * h * w
        if offset + count * np.dtype(dtype).itemsize > len(buf):
            raise FormatError(f"MTDS sample truncated in block {name!r}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        shape = (channels, h, w) if channels > 1 else (h, w)
        fields[name] = arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))
    if offset != len(buf):
        raise FormatError("trailing bytes after MTDS sample")
    return Sample(**fields)


def export_split(dataset: SyntheticDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset.samples):
        (directory / f"{i:06d}.mtds").write_bytes(encode_sample(sample))
    index = {
        "split": dataset.split,
        "count": len(dataset),
        "height": dataset.cfg.height,
        "width": dataset.cfg.width,
        "seed": dataset.cfg.seed,
        "blocks": [{"name": n, "channels": c, "dtype": d} for n, c, d in BLOCKS],
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return directory


def read_split(directory) -> list[Sample]:
    directory = Path(directory)
    return [decode_sample(p.read_bytes()) for p in sorted(directory.glob("*.mtds"))]
