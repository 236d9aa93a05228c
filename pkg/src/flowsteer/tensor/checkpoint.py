"""Parameter checkpoint file.

Layout (documented in docs/formats.md):
    magic "FSCKPT1\\n" (8 bytes)
    u32 little-endian: manifest byte length
    manifest: UTF-8 JSON list of {"name", "shape", "dtype", "offset"}
    raw scalar data, little-endian, in manifest order
Offsets are relative to the start of the data region.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Tensor

MAGIC = b"FSCKPT1\n"


def save_checkpoint(path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = params[name].data
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"tensors": entries, "extra": extra or {}}
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a flowsteer checkpoint")
    (mlen,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    data_start = 12 + mlen
    params: dict[str, Tensor] = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count,
                            offset=data_start + e["offset"])
        arr = arr.astype(np.dtype(e["dtype"])).reshape(e["shape"])
        t = Tensor(arr.copy(), requires_grad=True, name=e["name"])
        t.data = t.data.astype(arr.dtype)  # preserve stored precision
        params[e["name"]] = t
    return params, manifest.get("extra", {})
