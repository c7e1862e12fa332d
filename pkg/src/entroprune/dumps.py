"""Layer activation dumps: conv geometry plus captured (input, output) tensors.

On disk a dump is a directory holding ``meta.json`` (layer id + geometry),
``X.tdf`` (inputs, T x D x H x W) and ``Y.tdf`` (outputs, T x M x H' x W').
float32 dumps are widened to float64 on load; all solver math runs in f64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ValidationError
from .tdf import check_finite, read_tdf_f64, write_tdf


@dataclass(frozen=True)
class ConvGeometry:
    """Shape contract of one convolutional (or 1x1 = fully connected) layer.

    kernel must be odd; kernel == 1 encodes a fully connected layer acting
    per position.
    """

    kernel: int
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(f"kernel extent must be odd and >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ValidationError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValidationError(f"padding must be nonnegative, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be positive")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial extents for an h x w input."""
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(
                f"kernel {self.kernel} with padding {self.padding} does not fit a "
                f"{h}x{w} input"
            )
        return oh, ow

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvGeometry":
        try:
            return cls(
                kernel=int(d["kernel"]),
                stride=int(d["stride"]),
                padding=int(d["padding"]),
                in_channels=int(d["in_channels"]),
                out_channels=int(d["out_channels"]),
            )
        except KeyError as exc:
            raise DataError(f"geometry record is missing field {exc}") from exc


@dataclass
class LayerDump:
    """Captured activations of one layer: the raw material for one regression."""

    layer_id: str
    geometry: ConvGeometry
    inputs: np.ndarray   # (T, D, H, W), float64
    outputs: np.ndarray  # (T, M, H', W'), float64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        check_finite(self.inputs, f"dump {self.layer_id} inputs")
        check_finite(self.outputs, f"dump {self.layer_id} outputs")
        g = self.geometry
        if self.inputs.ndim != 4 or self.outputs.ndim != 4:
            raise ValidationError(f"dump {self.layer_id}: tensors must be 4-d")
        t_in, d, h, w = self.inputs.shape
        t_out, m, oh, ow = self.outputs.shape
        if t_in != t_out:
            raise ValidationError(
                f"dump {self.layer_id}: {t_in} input samples vs {t_out} outputs"
            )
        if d != g.in_channels or m != g.out_channels:
            raise ValidationError(
                f"dump {self.layer_id}: channel counts {d}->{m} do not match geometry "
                f"{g.in_channels}->{g.out_channels}"
            )
        if (oh, ow) != g.out_size(h, w):
            raise ValidationError(
                f"dump {self.layer_id}: output extent {oh}x{ow} inconsistent with "
                f"geometry on a {h}x{w} input (expected {g.out_size(h, w)})"
            )

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.outputs.shape[2], self.outputs.shape[3]


def save_dump(dump: LayerDump, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {"layer_id": dump.layer_id, "geometry": dump.geometry.to_dict()}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_tdf(os.path.join(directory, "X.tdf"), dump.inputs)
    write_tdf(os.path.join(directory, "Y.tdf"), dump.outputs)


def load_dump(directory) -> LayerDump:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"missing dump metadata: {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    for name in ("X.tdf", "Y.tdf"):
        if not os.path.isfile(os.path.join(directory, name)):
            raise DataError(f"missing dump tensor: {os.path.join(directory, name)}")
    geometry = ConvGeometry.from_dict(meta.get("geometry", {}))
    return LayerDump(
        layer_id=str(meta.get("layer_id", os.path.basename(str(directory)))),
        geometry=geometry,
        inputs=read_tdf_f64(os.path.join(directory, "X.tdf")),
        outputs=read_tdf_f64(os.path.join(directory, "Y.tdf")),
    )
