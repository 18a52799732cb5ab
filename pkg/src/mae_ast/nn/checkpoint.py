"""Checkpoint I/O.

A checkpoint is a directory holding

* ``manifest.json``: ``{"params": [{"name", "shape", "dtype", "offset"}, ...]}``
* ``params.bin``: little-endian float32 values, concatenated in manifest order
* ``config.json``: free-form sidecar (model config, normalizer statistics, ...)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST = "manifest.json"
BLOB = "params.bin"
SIDECAR = "config.json"
_DTYPE = np.dtype("<f4")


def save_checkpoint(path, params: Mapping[str, np.ndarray], sidecar: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            fh.write(raw)
            offset += len(raw)
    (path / MANIFEST).write_text(json.dumps({"params": entries, "total_bytes": offset}, indent=1))
    (path / SIDECAR).write_text(json.dumps(dict(sidecar or {}), indent=1, sort_keys=True))
    return path


def resolve(path) -> Path:
    """Accept either the checkpoint directory or its manifest file."""
    path = Path(path)
    if path.is_file() and path.name == MANIFEST:
        path = path.parent
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no checkpoint manifest under {path}")
    return path


def read_manifest(path) -> dict:
    return json.loads((resolve(path) / MANIFEST).read_text())


def read_sidecar(path) -> dict:
    p = resolve(path) / SIDECAR
    return json.loads(p.read_text()) if p.exists() else {}


def load_checkpoint(path, dtype=np.float32) -> tuple[dict[str, np.ndarray], dict]:
    path = resolve(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * _DTYPE.itemsize
        if end > len(blob):
            raise ValueError(f"checkpoint blob truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype)
    return params, read_sidecar(path)
