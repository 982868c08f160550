"""Two-file checkpoints: ``<prefix>.manifest.json`` plus ``<prefix>.bin``.

The blob is every parameter as little-endian float32, concatenated in the
order the manifest lists them. The manifest alone is enough to rebuild the
model structure (standard, routed and pruned layers).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig, Init, LayerNormParams
from .expert_attention import DeterministicLayer, ExpanderFFN, ExpertHead, MoELayer

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".manifest.json"), Path(prefix + ".bin")


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def layer_meta(model: Encoder) -> dict[str, dict]:
    meta = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, MoELayer):
            meta[str(i)] = {"k": layer.k, "n": layer.n_experts}
        elif isinstance(layer, DeterministicLayer):
            meta[str(i)] = {"m": layer.m, "retained": list(layer.retained)}
    return meta


def build_manifest(model: Encoder) -> dict:
    tensors = []
    offset = 0
    for p in model.parameters():
        nbytes = int(p.size) * _DTYPE.itemsize
        tensors.append({
            "name": p.name,
            "shape": [int(s) for s in p.shape],
            "dtype": "f32",
            "offset": offset,
            "byte_length": nbytes,
        })
        offset += nbytes
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layer_kinds": model.layer_kinds(),
        "moe_meta": layer_meta(model),
        "tensors": tensors,
    }


def save(model: Encoder, prefix) -> tuple[Path, Path]:
    """Write the manifest and blob; output bytes depend only on the model."""
    manifest_path, blob_path = _paths(prefix)
    manifest = build_manifest(model)
    blob = b"".join(
        np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes() for p in model.parameters()
    )
    try:
        _atomic_write(blob_path, blob)
        _atomic_write(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())
    except OSError as e:
        raise OSError(f"failed to write checkpoint {prefix}: {e}") from e
    return manifest_path, blob_path


def _skeleton_model(manifest: dict) -> Encoder:
    cfg = EncoderConfig.from_dict(manifest["config"])
    model = Encoder(cfg, skeleton=True)
    init = model.init
    kinds = manifest["layer_kinds"]
    meta = manifest.get("moe_meta", {})
    if len(kinds) != cfg.n_layers:
        raise CheckpointError(f"{len(kinds)} layer kinds for n_layers={cfg.n_layers}")
    for i, kind in enumerate(kinds):
        prefix = f"layer.{i}"
        if kind == "standard":
            continue
        info = meta.get(str(i))
        if info is None:
            raise CheckpointError(f"layer {i} is {kind!r} but has no moe_meta entry")
        if kind == "moe":
            model.layers[i] = MoELayer(prefix, cfg, init, n_experts=info["n"], k=info["k"])
        elif kind == "deterministic":
            experts = [ExpertHead(f"{prefix}.expert.{j}", cfg, init) for j in info["retained"]]
            model.layers[i] = DeterministicLayer(
                prefix,
                experts,
                ExpanderFFN(f"{prefix}.expander", cfg, init),
                LayerNormParams(f"{prefix}.ln", cfg.d, init),
                info["retained"],
            )
        else:
            raise CheckpointError(f"unknown layer kind {kind!r} at layer {i}")
    return model


def load(prefix) -> Encoder:
    manifest_path, blob_path = _paths(prefix)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = blob_path.read_bytes()
    except OSError as e:
        raise OSError(f"failed to read checkpoint {prefix}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version!r}")

    model = _skeleton_model(manifest)
    params = model.named_parameters()
    entries = manifest["tensors"]
    seen = set()
    expected_offset = 0
    for entry in entries:
        name = entry["name"]
        if name in seen:
            raise CheckpointError(f"tensor {name!r} listed twice")
        seen.add(name)
        if name not in params:
            raise CheckpointError(f"tensor {name!r} does not belong to the model structure")
        p = params[name]
        shape = tuple(entry["shape"])
        if shape != tuple(p.shape):
            raise CheckpointError(f"tensor {name!r}: shape {shape} != expected {tuple(p.shape)}")
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
        n = int(np.prod(shape, dtype=np.int64))
        if entry["byte_length"] != n * _DTYPE.itemsize:
            raise CheckpointError(
                f"tensor {name!r}: byte_length {entry['byte_length']} != {n * _DTYPE.itemsize}"
            )
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"tensor {name!r}: offset {entry['offset']} != expected {expected_offset}"
            )
        end = expected_offset + entry["byte_length"]
        if end > len(blob):
            raise CheckpointError(f"tensor {name!r}: blob truncated ({len(blob)} bytes)")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=n, offset=expected_offset).reshape(shape)
        p.data = arr.astype(model.config.dtype, copy=True)
        p.grad = np.zeros_like(p.data)
        expected_offset = end
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {sorted(missing)[0]!r}")
    if expected_offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - expected_offset} trailing bytes")
    model.init = Init(model.config)
    return model
