"""Self-describing binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 version, uint64 JSON header
length, the JSON header (array names, shapes, byte offsets, plus arbitrary
JSON-safe extras), then concatenated little-endian float64 payloads.
Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"RSPLATCK"
_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], extra: dict | None = None):
    """Write named float64 arrays and a JSON-safe extra dict atomically."""
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)  # note: promotes 0-d to 1-d
        entries.append({"name": name, "shape": shape, "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": _VERSION, "arrays": entries,
                         "extra": extra or {}}).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in payloads:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, extra)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version = struct.unpack("<I", f.read(4))[0]
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header_len = struct.unpack("<Q", f.read(8))[0]
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("extra", {})
