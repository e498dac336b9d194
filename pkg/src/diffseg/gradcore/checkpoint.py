"""Binary container for named float32 arrays plus JSON metadata.

Layout (all integers unsigned 32-bit little-endian)::

    magic      8 bytes  b"DSEGCKPT"
    version    u32      currently 1
    meta_len   u32      byte length of the metadata block
    metadata   bytes    UTF-8 JSON object, keys sorted, compact separators
    count      u32      number of tensors
    count x:
        name_len u32
        name     bytes  UTF-8
        ndim     u32
        extents  ndim x u32
        data     prod(extents) x float32 little-endian, row-major

Identical inputs always serialize to identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

from ..errors import DataError

MAGIC = b"DSEGCKPT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(int(n)) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    pos = 8

    def u32():
        nonlocal pos
        (val,) = _U32.unpack_from(blob, pos)
        pos += 4
        return val

    version = u32()
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    meta_len = u32()
    metadata = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name_len = u32()
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = data.astype(np.float32)
    if pos != len(blob):
        raise DataError(f"trailing bytes in checkpoint ({len(blob) - pos})")
    return tensors, metadata


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         metadata: Mapping | None = None) -> None:
    blob = encode(tensors, metadata)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
