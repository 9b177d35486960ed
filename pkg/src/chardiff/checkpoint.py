"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CHDF" | u32 version | u32 len | config JSON | u32 len | index JSON
    | tensor blobs | u32 CRC-32 of everything before it

The index lists ``{name, dtype, shape, offset, nbytes, trainable}`` with
offsets relative to the start of the blob section.  Blobs are stored
little-endian as float32 (or float64 for 64-bit models).
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"CHDF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor], config: dict) -> None:
    index = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.asarray(t.data)
        dt = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(arr.dtype)
        if dt is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        index.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), "trainable": bool(t.requires_grad)})
        blobs.append(raw)
        offset += len(raw)
    cfg_raw = json.dumps(config, sort_keys=True).encode("utf-8")
    idx_raw = json.dumps(index).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_raw)), cfg_raw,
                     struct.pack("<I", len(idx_raw)), idx_raw, *blobs])
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    """Return ``(params, config)``; raises CheckpointError on any corruption."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    config = json.loads(body[pos + 4:pos + 4 + n])
    pos += 4 + n
    (n,) = struct.unpack_from("<I", body, pos)
    index = json.loads(body[pos + 4:pos + 4 + n])
    base = pos + 4 + n
    params = {}
    for entry in index:
        dt = np.dtype("<f4") if entry["dtype"] == "f32" else np.dtype("<f8")
        start = base + entry["offset"]
        arr = np.frombuffer(body, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=start)
        arr = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        params[entry["name"]] = Tensor(arr, requires_grad=entry["trainable"], name=entry["name"], dtype=arr.dtype)
    return params, config
