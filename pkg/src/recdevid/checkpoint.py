"""Checkpoint directory: ``manifest.json`` plus a ``params.bin`` blob of
little-endian arrays laid end to end."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .model import ConfigError, DeviceIdModel, ModelConfig

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "recdevid-checkpoint/1"


class CheckpointError(IOError):
    """Missing, corrupt or mismatched checkpoint."""


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(model: DeviceIdModel, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    tensors = [("param", n, p.data) for n, p in model.named_parameters()]
    tensors += [("buffer", n, b) for n, b in model.named_buffers()]
    for kind, name, arr in tensors:
        raw = _le(arr).tobytes()
        entries.append({"name": name, "kind": kind, "dtype": _le(arr).dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "provenance": provenance or {},
        "blob": {"file": BLOB, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
        "tensors": entries,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path) -> DeviceIdModel:
    """Rebuild the model and restore every parameter and buffer bit-exactly."""
    path = Path(path)
    manifest = read_manifest(path)
    bpath = path / manifest["blob"]["file"]
    if not bpath.is_file():
        raise CheckpointError(f"missing blob {bpath}")
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob"]["nbytes"]:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest says {manifest['blob']['nbytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob"]["sha256"]:
        raise CheckpointError("blob checksum mismatch")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad model config in manifest: {exc}") from None
    model = DeviceIdModel(config, manifest.get("seed", 0))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for e in manifest["tensors"]:
        name, kind = e["name"], e["kind"]
        if name in seen:
            raise CheckpointError(f"tensor {name} listed twice")
        seen.add(name)
        target = params.get(name) if kind == "param" else buffers.get(name)
        if target is None:
            raise CheckpointError(f"checkpoint {kind} {name} not in model")
        start, n = e["offset"], e["nbytes"]
        if start < 0 or start + n > len(blob):
            raise CheckpointError(f"{name} extends past end of blob")
        dt = np.dtype(e["dtype"])
        if n % dt.itemsize:
            raise CheckpointError(f"{name}: {n} bytes is not a whole number of {dt} items")
        arr = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=start)
        shape = tuple(e["shape"])
        expected = params[name].shape if kind == "param" else buffers[name].shape
        if shape != expected or arr.size != int(np.prod(shape)) or arr.nbytes != n:
            raise CheckpointError(f"{name}: shape {shape} / {n} bytes does not fit model shape {expected}")
        native = arr.reshape(shape).astype(arr.dtype.newbyteorder("="))
        if kind == "param":
            params[name].data = native.copy()
        else:
            model.set_buffer(name, native)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
    return model


def checkpoint_exists(path) -> bool:
    return os.path.isfile(Path(path) / MANIFEST)
