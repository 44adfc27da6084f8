"""Binary checkpoint container: magic, JSON header, raw named blobs.

Writes go to a temp file which is atomically renamed, so an interrupted
save never corrupts the previous checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np

MAGIC_MODEL = b"GWN1"
MAGIC_CLASSIFIER = b"GWNP1"
_VERSION = 1


class CheckpointError(Exception):
    pass


def save(path: str, magic: bytes, config: dict,
         arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": entries},
                        sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IQ", _VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load(path: str, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        got = f.read(len(magic))
        if got != magic:
            raise CheckpointError(
                f"{path}: bad magic {got!r}, expected {magic!r}")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(header_len).decode())
        body = f.read()
    arrays = {}
    for e in header["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])) \
            .reshape(e["shape"]).copy()
    return header["config"], arrays
