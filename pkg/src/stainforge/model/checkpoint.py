"""Flat binary checkpoint format.

Layout: magic line, little-endian uint64 header length, JSON header listing
tensor names/shapes/dtypes/offsets plus free-form metadata, then raw
little-endian payloads. The format is byte-deterministic for identical
inputs (no timestamps or compression).
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"SFCKPT1\n"

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8", "<i4": "<i4"}


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], meta: dict):
    entries = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8")
        elif arr.dtype in (np.int64,):
            arr = arr.astype("<i8")
        elif arr.dtype in (np.int32,):
            arr = arr.astype("<i4")
        else:
            arr = arr.astype("<f4")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a stainforge checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        blob = f.read()
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise ValueError(f"unsupported dtype {e['dtype']}")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return tensors, header["meta"]
