"""Checkpoint format ``vit5-ckpt/1``: a JSON manifest plus a little-endian f32 blob.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``. The
manifest records the model config, each tensor's name, shape and byte offset,
the SHA-256 of the blob, and a SHA-256 of its own canonical form.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import Vit5Model

FORMAT = "vit5-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def manifest_for(model: Vit5Model) -> tuple[dict, bytes]:
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "dtype": "<f4"})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest["manifest_sha256"] = hashlib.sha256(_canonical(manifest)).hexdigest()
    return manifest, blob


def save(model: Vit5Model, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, blob = manifest_for(model)
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load(path: str | os.PathLike) -> Vit5Model:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable {MANIFEST} ({exc})") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: {MANIFEST} is not an object")
    if manifest.get("format") != FORMAT:
        raise CheckpointVersionError(f"{path}: format {manifest.get('format')!r}, expected {FORMAT!r}")
    stored = manifest.pop("manifest_sha256", None)
    if stored != hashlib.sha256(_canonical(manifest)).hexdigest():
        raise CheckpointHashError(f"{path}: manifest hash mismatch")
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise CheckpointTruncatedError(f"{path}: no {BLOB}") from None
    if len(blob) < manifest["blob_bytes"]:
        raise CheckpointTruncatedError(f"{path}: blob has {len(blob)} bytes, expected {manifest['blob_bytes']}")
    if len(blob) > manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointHashError(f"{path}: blob hash mismatch")
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    with T.precision("f32"):
        for e in manifest["tensors"]:
            n = int(np.prod(e["shape"])) * 4
            arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=e["offset"]).reshape(e["shape"])
            params[e["name"]] = T.parameter(arr.astype(np.float32))
    return Vit5Model(cfg, params, seed=manifest.get("seed"))
