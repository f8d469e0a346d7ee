"""Checkpoint files: a JSON header followed by raw little-endian float arrays.

Layout::

    b"MOSACKPT" | uint64 LE header length | UTF-8 JSON header | payload

The header carries ``config``, ``train``, ``step``, ``seed``, free-form
``extra`` state, and a ``tensors`` index of ``{name, shape, dtype, offset}``
entries pointing into the payload.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOSACKPT"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], header: dict) -> None:
    path = Path(path)
    index, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in chunks:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    base = 16 + n
    arrays = {}
    for entry in header.pop("tensors"):
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return arrays, header
