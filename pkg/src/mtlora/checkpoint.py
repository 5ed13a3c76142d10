"""The MTLR checkpoint container.

Layout: ``b"MTLR"``, a little-endian u16 format version, a u32 manifest
length, the UTF-8 JSON manifest, then every array as raw little-endian bytes
at the offset recorded in the manifest (relative to the end of the manifest).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .errors import FormatError
from .heads import TaskSpec
from .lora import MTLoRALinear, merge_adapter
from .model import FreezePolicy, MTLModel, build_model
from .tensor import Parameter

MAGIC = b"MTLR"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


def config_echo(model: MTLModel) -> dict:
    return {
        "backbone": dataclasses.asdict(model.cfg),
        "tasks": [dataclasses.asdict(t) for t in model.task_specs.values()],
        "strategy": getattr(model, "strategy", "mtlora"),
        "policy": dataclasses.asdict(getattr(model, "policy", FreezePolicy())),
        "fusion_dim": model.fusion_dim,
        "trainable_params": trainable_budget(model),
    }


def trainable_budget(model: MTLModel) -> int:
    """Trainable-parameter count of the model as trained (survives merging)."""
    return getattr(model, "trainable_budget", None) or model.num_trainable()


def model_from_echo(echo: dict) -> MTLModel:
    cfg = BackboneConfig(**echo["backbone"])
    tasks = [TaskSpec(**t) for t in echo["tasks"]]
    policy = FreezePolicy(**echo["policy"])
    return build_model(cfg, tasks, echo["strategy"], policy=policy, fusion_dim=echo["fusion_dim"])


def adapter_alphas(model: MTLModel) -> dict[str, float]:
    """Current scale of every adapted layer (set_alpha may differ from the config)."""
    return {name: layer.alpha for name, layer in model.named_modules() if isinstance(layer, MTLoRALinear) and layer.adapters()}


def _write(path, arrays: list[tuple[str, np.ndarray, bool]], model: MTLModel, merged_layers: list[str]) -> Path:
    entries = []
    offset = 0
    blobs = []
    for name, arr, merged in arrays:
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": data.dtype.str, "offset": offset, "merged": merged}
        )
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps(
        {
            "version": VERSION,
            "config": config_echo(model),
            "alphas": adapter_alphas(model),
            "merged_layers": merged_layers,
            "entries": entries,
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    return path


def save_checkpoint(model: MTLModel, path) -> Path:
    """Every parameter, adapters unmerged."""
    arrays = [(name, p.data, False) for name, p in model.named_parameters()]
    return _write(path, arrays, model, [])


def export_merged(model: MTLModel, path) -> Path:
    """Fold shared adapters into their base weights and write the result.

    Layers without task adapters store ``W + alpha * B @ A`` in place of
    ``W``.  Layers with task adapters keep ``W`` (the task branches still
    need it) and store the merged shared-path weight as ``shared_weight``.
    Task adapters are written unmerged.
    """
    merged_layers = []
    skip = set()
    replace: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for lname, layer in model.named_modules():
        if not isinstance(layer, MTLoRALinear) or layer.shared is None:
            continue
        weight, _ = merge_adapter(layer, "shared")
        merged_layers.append(lname)
        skip.update({f"{lname}.shared.A", f"{lname}.shared.B"})
        if layer.task_adapters:
            extra[f"{lname}.weight"] = weight
        else:
            replace[f"{lname}.weight"] = weight
    arrays = []
    for name, p in model.named_parameters():
        if name in skip:
            continue
        arrays.append((name, replace.get(name, p.data), name in replace))
        if name in extra:
            lname = name[: -len(".weight")]
            arrays.append((f"{lname}.shared_weight", extra[name], True))
    return _write(path, arrays, model, merged_layers)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for an MTLR header")
    magic, version, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("not an MTLR checkpoint (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported MTLR version {version}")
    start = _HEADER.size + mlen
    try:
        manifest = json.loads(buf[_HEADER.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc
    arrays = {}
    end = start
    for e in manifest["entries"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo < end or lo + count * dtype.itemsize > len(buf):
            raise FormatError(f"entry {e['name']!r} overlaps or runs past the end of the file")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=lo).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
        end = lo + arr.nbytes
    if end != len(buf):
        raise FormatError("trailing bytes after the last entry")
    return manifest, arrays


def load_checkpoint(path, model: MTLModel | None = None) -> MTLModel:
    """Rebuild (or fill) a model from a saved or merged checkpoint."""
    manifest, arrays = read_container(path)
    if model is None:
        model = model_from_echo(manifest["config"])
    layers = dict(model.named_modules())
    for lname in manifest["merged_layers"]:
        layer = layers.get(lname)
        if not isinstance(layer, MTLoRALinear):
            raise FormatError(f"merged layer {lname!r} does not exist in the model")
        layer.shared = None
        if f"{lname}.shared_weight" in arrays:
            layer.shared_weight = Parameter(np.zeros_like(layer.weight.data), role="weight", trainable=False)
    for lname, alpha in manifest.get("alphas", {}).items():
        layer = layers.get(lname)
        if not isinstance(layer, MTLoRALinear):
            raise FormatError(f"adapter scale given for unknown layer {lname!r}")
        layer.set_alpha(alpha)
    if manifest["merged_layers"]:
        model.trainable_budget = manifest["config"].get("trainable_params")
    model.assign_names()
    params = dict(model.named_parameters())
    missing = set(params) - set(arrays)
    unknown = set(arrays) - set(params)
    if missing or unknown:
        raise FormatError(f"checkpoint does not match model: missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape:
            raise FormatError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.dtype)
    return model
