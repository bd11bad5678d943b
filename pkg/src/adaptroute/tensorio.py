"""Flat little-endian float64 blobs with a JSON shape manifest.

Every persisted parameter set (backbone, adapters, heads, routers) uses
this layout: ``<name>.bin`` holds the tensors back to back in manifest
order, ``<name>.json`` lists names, shapes and element offsets.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ParseError

DTYPE = np.dtype("<f8")


def pack(tensors: Mapping[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return b"".join(chunks), entries


def unpack(blob: bytes, entries: list[dict]) -> dict[str, np.ndarray]:
    flat = np.frombuffer(blob, dtype=DTYPE)
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + n > flat.size:
            raise ParseError(f"blob too short for tensor {e['name']}")
        out[e["name"]] = flat[start:start + n].reshape(e["shape"]).astype(np.float64)
    return out


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(bin_path: Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``bin_path`` and its manifest ``bin_path.with_suffix('.json')``."""
    bin_path = Path(bin_path)
    blob, entries = pack(tensors)
    manifest = {"dtype": "float64-le", "tensors": entries, "meta": meta or {}}
    atomic_write(bin_path, blob)
    atomic_write(bin_path.with_suffix(".json"), json.dumps(manifest, indent=1, sort_keys=True))


def load(bin_path: Path) -> tuple[dict[str, np.ndarray], dict]:
    bin_path = Path(bin_path)
    manifest = json.loads(bin_path.with_suffix(".json").read_text(encoding="utf-8"))
    tensors = unpack(bin_path.read_bytes(), manifest["tensors"])
    return tensors, manifest.get("meta", {})
