"""Standalone TDF codec (the toolkit's tensor wire format).

magic "TDF1" | dtype u8 (0=f32, 1=f64) | ndim u8 | shape ndim x u64 LE |
row-major little-endian payload. Reimplemented here so the adapter only
depends on the documented format, not on the toolkit's internals.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TDF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tdf(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        code = 0
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_tdf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a TDF file")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 6)
    offset = 6 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    return np.frombuffer(raw, dtype=_DTYPES[code], count=count, offset=offset).reshape(shape)
