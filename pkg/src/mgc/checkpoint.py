"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    magic       8 bytes   b"MGCCKPT1"
    n_tensors   uint32
    repeated n_tensors times:
        name_len   uint16
        name       name_len bytes, UTF-8
        ndim       uint8
        dims       ndim x uint32
        data       prod(dims) x float32 (little-endian, C order)
    meta_len    uint64
    meta        meta_len bytes, UTF-8 JSON object

Integer buffers (e.g. batch-norm counters) are stored as float32 and cast
back on load; they stay exact below 2**24.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

MAGIC = b"MGCCKPT1"


class CheckpointError(ValueError):
    pass


def save_container(path: Union[str, os.PathLike], tensors: Mapping[str, np.ndarray],
                   meta: Mapping[str, Any]) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"cannot store tensor {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)) + blob)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_container(path: Union[str, os.PathLike]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (n,) = take("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = take("<H")
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        if off + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    (meta_len,) = take("<Q")
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    return tensors, meta
