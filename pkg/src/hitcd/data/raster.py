"""HITR raster files.

Header (little-endian): ``HITR``, u8 version (1), u8 dtype (0 = f32, 1 = u8),
u16 reserved (0), u32 channels, u32 height, u32 width; then the payload in
(C, H, W) order.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HITR"
VERSION = 1
_HEADER = struct.Struct("<4sBBHIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class RasterError(ValueError):
    pass


def encode_raster(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise RasterError(f"raster must be (C,H,W), got shape {arr.shape}")
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        code, payload = 1, arr.astype("u1")
    else:
        code, payload = 0, arr.astype("<f4")
    C, H, W = arr.shape
    return _HEADER.pack(MAGIC, VERSION, code, 0, C, H, W) + np.ascontiguousarray(payload).tobytes()


def decode_raster(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise RasterError("truncated HITR header")
    magic, version, code, reserved, C, H, W = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise RasterError("bad magic; not a HITR raster")
    if version != VERSION:
        raise RasterError(f"unsupported HITR version {version}")
    if code not in _DTYPES:
        raise RasterError(f"unknown HITR dtype code {code}")
    dtype = _DTYPES[code]
    expected = _HEADER.size + C * H * W * dtype.itemsize
    if len(buf) != expected:
        raise RasterError(f"HITR payload size {len(buf)} != expected {expected}")
    out = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(C, H, W)
    return out.astype(np.float32 if code == 0 else np.uint8)


def write_raster(path, array: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_raster(array))
    os.replace(tmp, path)


def read_raster(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes())
