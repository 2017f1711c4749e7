"""Checkpoint directories: ``manifest.json`` plus one little-endian float32 blob.

The manifest lists every parameter's name, shape and byte offset into
``params.bin`` together with an integer ``format_version``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: nn.Module, path: str | os.PathLike, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "parameters": entries, "meta": meta or {}}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / BLOB).is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    blob = (path / BLOB).read_bytes()
    params = {}
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = arr.copy()
    return params, manifest.get("meta", {})


def load_checkpoint(model: nn.Module, path: str | os.PathLike) -> dict:
    """Load parameters into ``model`` in place; returns the stored metadata."""
    params, meta = read_checkpoint(path)
    own = model.state_dict()
    missing = set(own) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.load_state_dict({k: torch.as_tensor(params[k]).to(own[k].dtype) for k in own})
    return meta
