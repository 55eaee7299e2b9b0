"""Checkpoint directories: ``manifest.json`` plus a raw little-endian f32 blob.

The manifest records the model config, each parameter's name, shape and
byte offset into ``params.bin`` (in canonical parameter order), and the
training position (tokens seen, step, seed).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from phaselab.model import Model, ModelConfig, param_shapes

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "phaselab-checkpoint/1"

__all__ = ["save_checkpoint", "load_checkpoint", "read_manifest", "CheckpointError"]


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: Model, *, tokens_seen: int, step: int, seed: int, extra: dict | None = None) -> Path:
    """Write ``model`` to directory ``path`` atomically (blob first, manifest last)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    chunks = []
    for name, shape in param_shapes(model.config):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {shape}")
        entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / BLOB)
    manifest = {
        "format": FORMAT,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "params": entries,
        "total_bytes": offset,
        "tokens_seen": int(tokens_seen),
        "step": int(step),
        "seed": int(seed),
    }
    if extra:
        manifest["extra"] = extra
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path) -> dict:
    f = Path(path) / MANIFEST
    if not f.exists():
        raise CheckpointError(f"no manifest at {f}")
    manifest = json.loads(f.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{f}: unknown format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{path / BLOB}: {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    cfg = ModelConfig(**manifest["config"])
    params = {}
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(dtype)
    missing = {n for n, _ in param_shapes(cfg)} - params.keys()
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    return Model(cfg, params), manifest
