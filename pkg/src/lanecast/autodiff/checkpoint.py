"""Flat binary parameter checkpoints.

Layout::

    b"LCCK"                      magic
    u64 little-endian            header length in bytes
    header                       UTF-8 JSON: {"meta": {...}, "arrays": [{name, kind, shape}, ...]}
    body                         little-endian f32 arrays, row-major, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LCCK"


def save_checkpoint(path, arrays: Mapping[str, tuple[str, np.ndarray]], meta: dict | None = None) -> None:
    """Write ``{name: (layer_kind, array)}`` plus free-form ``meta``."""
    entries = []
    blobs = []
    for name, (kind, arr) in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "kind": kind, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, tuple[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a lanecast checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = (entry["kind"], arr.astype(np.float32))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after declared arrays")
    return arrays, header["meta"]
