"""Dataset loading: MNIST-style IDX files and generic TDF image/label pairs."""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .engine import EvalDataset
from .errors import DataError
from .tdf import MAGIC as TDF_MAGIC
from .tdf import read_tdf_f64

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":  # gzip
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> np.ndarray:
    """IDX image file -> (N, 1, rows, cols) float64 array scaled to [0, 1]."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic, count = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) < 8 + count:
        raise DataError(f"{path}: expected {8 + count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def _is_tdf(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == TDF_MAGIC


def load_eval_dataset(images_path, labels_path) -> EvalDataset:
    """Load an evaluation set from IDX or TDF files (format sniffed per file)."""
    if _is_tdf(images_path):
        images = read_tdf_f64(images_path)
        if images.ndim == 3:  # (N, H, W) -> single channel
            images = images[:, None, :, :]
    else:
        images = read_idx_images(images_path)
    if _is_tdf(labels_path):
        labels = read_tdf_f64(labels_path)
        if labels.ndim != 1:
            raise DataError(f"{labels_path}: labels tensor must be 1-d")
        rounded = np.rint(labels)
        if np.any(np.abs(labels - rounded) > 1e-9):
            raise DataError(f"{labels_path}: labels must be integral")
        labels = rounded.astype(np.int64)
    else:
        labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return EvalDataset(images, labels)
