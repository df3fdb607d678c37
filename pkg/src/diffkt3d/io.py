"""Raw raster files shared by case volumes and checkpoints.

Layout: 4-byte magic, three little-endian u32 extents (D, H, W), then the
values in row-major order. ``DKT3`` payloads are little-endian float32;
``DK64`` payloads are little-endian float64 (used for parameter tensors,
which must reload bit-exactly).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_F32 = b"DKT3"
MAGIC_F64 = b"DK64"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}
HEADER_BYTES = 16


class RasterFormatError(ValueError):
    pass


def _as_3d(shape):
    if len(shape) > 3:
        raise RasterFormatError(f"raster holds at most 3 axes, got shape {shape}")
    return (1,) * (3 - len(shape)) + tuple(int(s) for s in shape)


def encode_raster(values, precision=32):
    arr = np.asarray(values)
    magic = MAGIC_F32 if precision == 32 else MAGIC_F64
    dims = _as_3d(arr.shape)
    header = magic + struct.pack("<3I", *dims)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[magic]).tobytes()
    return header + payload


def decode_raster(blob, shape=None):
    """Parse raster bytes into a float64 array (optionally reshaped)."""
    if len(blob) < HEADER_BYTES:
        raise RasterFormatError("truncated raster header")
    magic = bytes(blob[:4])
    if magic not in _DTYPES:
        raise RasterFormatError(f"bad magic {magic!r}")
    dims = struct.unpack("<3I", blob[4:16])
    dtype = _DTYPES[magic]
    count = int(np.prod(dims))
    if len(blob) != HEADER_BYTES + count * dtype.itemsize:
        raise RasterFormatError(f"payload size does not match header extents {dims}")
    arr = np.frombuffer(blob, dtype=dtype, offset=HEADER_BYTES, count=count)
    arr = arr.astype(np.float64).reshape(dims)
    return arr.reshape(shape) if shape is not None else arr


def write_raster(path, values, precision=32):
    path = Path(path)
    try:
        path.write_bytes(encode_raster(values, precision))
    except OSError as err:
        raise OSError(f"cannot write raster {path}: {err}") from err


def read_raster(path, shape=None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise OSError(f"cannot read raster {path}: {err}") from err
    try:
        return decode_raster(blob, shape)
    except RasterFormatError as err:
        raise RasterFormatError(f"{path}: {err}") from None
