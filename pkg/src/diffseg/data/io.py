"""Image and mask file I/O.

Images are 8-bit RGB PNG, masks 8-bit single-channel PNG holding class
indices.  Files ending in ``.rawf`` use the raw float container::

    magic    4 bytes  b"RAWF"
    version  u32 LE   1
    ndim     u32 LE
    extents  ndim x u32 LE   (H, W) or (H, W, C)
    data     float32 LE, row-major

A raw mask stores class indices as floats.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError

RAW_MAGIC = b"RAWF"
RAW_VERSION = 1


def write_raw(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    header = RAW_MAGIC + struct.pack("<II", RAW_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw float container")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != RAW_VERSION:
        raise DataError(f"{path}: unsupported raw container version {version}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(shape))
    if len(blob) != offset + 4 * count:
        raise DataError(f"{path}: payload size does not match header")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64)


def _is_raw(path) -> bool:
    return os.fspath(path).endswith(".rawf")


def read_image(path) -> np.ndarray:
    """Load an image as H x W x C float64 in [0, 1]."""
    if _is_raw(path):
        img = read_raw(path)
        return img[..., None] if img.ndim == 2 else img
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = arr.astype(np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def read_mask(path) -> np.ndarray:
    """Load a class-index mask as H x W int64."""
    if _is_raw(path):
        return np.rint(read_raw(path)).astype(np.int64)
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I"):
            raise DataError(f"{path}: mask must be single-channel, found mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def to_uint8(image01: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image01, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image01: np.ndarray) -> None:
    """Write an H x W x C (C in {1, 3}) image in [0, 1] as 8-bit PNG."""
    arr = to_uint8(image01)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise DataError("mask indices must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PNG")
