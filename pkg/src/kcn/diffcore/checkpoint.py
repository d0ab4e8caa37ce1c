"""Portable parameter checkpoints.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"KCNCKPT1"
    8       8     uint64 H, byte length of the manifest
    16      H     manifest, UTF-8 JSON:
                    {"format": 1,
                     "metadata": {...free-form JSON...},
                     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    16+H    ...   payload: raw C-order values, each tensor at
                  16 + H + offset; dtype is "<f8" or "<f4"

Offsets are relative to the start of the payload, so the manifest can be
written before the data without knowing its own length.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Mapping, Optional, Tuple

import numpy as np

MAGIC = b"KCNCKPT1"
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.asarray(value)
        dtype = "<f4" if arr.dtype == np.float32 else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format": 1, "metadata": metadata or {}, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[dict, dict]:
    """Return ``(tensors, metadata)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    base = 16 + hlen
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r} for {entry['name']}")
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, manifest.get("metadata", {})
