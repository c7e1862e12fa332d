"""Tensor Dump Format (TDF) reader and writer.

Layout, bit-exact:

    magic   4 bytes         b"TDF1"
    dtype   u8              0 = float32, 1 = float64
    ndim    u8
    shape   ndim x u64      little-endian extents, row-major order
    payload                 raw values, row-major, little-endian

One tensor per file. All values must be finite; NaN or Inf anywhere in a
file is rejected on read and on write.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"TDF1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains NaN or Inf values")
    return arr


def write_tdf(path, arr: np.ndarray) -> None:
    """Write one float32/float64 array to `path` in TDF layout."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR_KIND:
        if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        else:
            raise DataError(f"unsupported dtype for TDF: {arr.dtype}")
    check_finite(arr, str(path))
    code = _CODE_FOR_KIND[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_tdf(path) -> np.ndarray:
    """Read one tensor; raises DataError on any malformed header or payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 6:
        raise DataError(f"{path}: truncated header")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    off = 6
    if len(raw) < off + 8 * ndim:
        raise DataError(f"{path}: truncated shape block")
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    dtype = _DTYPE_CODES[code]
    count = 1
    for extent in shape:
        count *= extent
    expected = off + count * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload length {len(raw) - off} does not match shape {shape}"
        )
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
    check_finite(arr, str(path))
    return arr


def read_tdf_f64(path) -> np.ndarray:
    """Read a tensor and widen float32 payloads to float64 (solver precision)."""
    return np.asarray(read_tdf(path), dtype=np.float64)
