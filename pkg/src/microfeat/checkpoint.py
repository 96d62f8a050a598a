"""Self-describing checkpoint container.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header, then
raw tensor bytes. The header records a config dict, a free-form JSON extra
dict, and per-tensor entries (path, shape, dtype, offset) pointing into the
data section. Round trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"MFCKPT1\n"


def save_checkpoint(path, config: dict, tensors: dict, extra: dict | None = None):
    """tensors: ordered {path: numpy array}; arrays written little-endian."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "path": name,
                "shape": list(arr.shape),
                "dtype": np.dtype(arr.dtype).str.lstrip("<>=|"),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": config, "extra": extra or {}, "entries": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (config dict, {path: numpy array}, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for e in header["entries"]:
        dt = np.dtype("<" + e["dtype"])
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["path"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
    return header["config"], tensors, header["extra"]
