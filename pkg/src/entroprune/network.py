"""Network descriptions: ordered layer records with attached weights.

The on-disk form is ``net.json`` (layer list + input shape) plus one TDF
file per weight tensor, named ``<layer_id>.<slot>.tdf``. Conv kernels are
stored as (D, M, k, k): first axis input channel, second output channel.
Linear weights are (M, D) acting on row-major-flattened inputs, so a
linear layer following a flatten is exactly a stride-free convolution with
window equal to the pre-flatten spatial extent.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DataError, StructuralError, ValidationError
from .tdf import read_tdf_f64, write_tdf

BN_EPS = 1e-5


@dataclass
class ConvLayer:
    id: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True
    weight: Optional[np.ndarray] = None  # (D, M, k, k)
    bias: Optional[np.ndarray] = None    # (M,)

    type_name = "conv"

    def param_count(self) -> int:
        n = self.kernel**2 * self.in_channels * self.out_channels
        return n + (self.out_channels if self.has_bias else 0)

    def param_tensors(self):
        out = []
        if self.weight is not None:
            out.append(self.weight)
        if self.has_bias and self.bias is not None:
            out.append(self.bias)
        return out


@dataclass
class LinearLayer:
    id: str
    in_features: int
    out_features: int
    has_bias: bool = True
    weight: Optional[np.ndarray] = None  # (M, D)
    bias: Optional[np.ndarray] = None

    type_name = "linear"

    def param_count(self) -> int:
        n = self.in_features * self.out_features
        return n + (self.out_features if self.has_bias else 0)

    def param_tensors(self):
        out = []
        if self.weight is not None:
            out.append(self.weight)
        if self.has_bias and self.bias is not None:
            out.append(self.bias)
        return out


@dataclass
class MaxPoolLayer:
    id: str
    kernel: int
    stride: int

    type_name = "maxpool"

    def param_count(self) -> int:
        return 0

    def param_tensors(self):
        return []


@dataclass
class AvgPoolLayer:
    id: str
    kernel: int
    stride: int

    type_name = "avgpool"

    def param_count(self) -> int:
        return 0

    def param_tensors(self):
        return []


@dataclass
class ReluLayer:
    id: str

    type_name = "relu"

    def param_count(self) -> int:
        return 0

    def param_tensors(self):
        return []


@dataclass
class FlattenLayer:
    id: str

    type_name = "flatten"

    def param_count(self) -> int:
        return 0

    def param_tensors(self):
        return []


@dataclass
class BatchNormLayer:
    """Inference-mode batch normalization; affine scale/shift are parameters,
    running statistics are buffers and are not counted."""

    id: str
    channels: int
    eps: float = BN_EPS
    scale: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    type_name = "batchnorm"

    def param_count(self) -> int:
        return 2 * self.channels

    def param_tensors(self):
        return [t for t in (self.scale, self.shift) if t is not None]


@dataclass
class ResidualBegin:
    id: str
    tag: str

    type_name = "residual_begin"

    def param_count(self) -> int:
        return 0

    def param_tensors(self):
        return []


@dataclass
class ResidualAdd:
    id: str
    tag: str
    shortcut_conv: Optional[ConvLayer] = None
    shortcut_bn: Optional[BatchNormLayer] = None

    type_name = "residual_add"

    def param_count(self) -> int:
        n = 0
        if self.shortcut_conv is not None:
            n += self.shortcut_conv.param_count()
        if self.shortcut_bn is not None:
            n += self.shortcut_bn.param_count()
        return n

    def param_tensors(self):
        out = []
        if self.shortcut_conv is not None:
            out.extend(self.shortcut_conv.param_tensors())
        if self.shortcut_bn is not None:
            out.extend(self.shortcut_bn.param_tensors())
        return out


Layer = Union[
    ConvLayer,
    LinearLayer,
    MaxPoolLayer,
    AvgPoolLayer,
    ReluLayer,
    FlattenLayer,
    BatchNormLayer,
    ResidualBegin,
    ResidualAdd,
]


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    layers: list = field(default_factory=list)

    def layer_by_id(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise StructuralError(f"{self.name}: no layer with id {layer_id!r}")

    def index_of(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise StructuralError(f"{self.name}: no layer with id {layer_id!r}")


def _shape_after(layer: Layer, state, net_name: str):
    """Propagate a shape token through one layer.

    `state` is ("spatial", C, H, W) or ("flat", n). Raises StructuralError
    naming the layer on any mismatch.
    """
    kind = state[0]

    def spatial():
        if kind != "spatial":
            raise StructuralError(f"{net_name}/{layer.id}: expects a spatial input")
        return state[1], state[2], state[3]

    if isinstance(layer, ConvLayer):
        c, h, w = spatial()
        if c != layer.in_channels:
            raise StructuralError(
                f"{net_name}/{layer.id}: input has {c} channels, layer expects "
                f"{layer.in_channels}"
            )
        oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise StructuralError(f"{net_name}/{layer.id}: kernel does not fit input")
        if layer.weight is not None and layer.weight.shape != (
            layer.in_channels,
            layer.out_channels,
            layer.kernel,
            layer.kernel,
        ):
            raise StructuralError(f"{net_name}/{layer.id}: kernel tensor shape mismatch")
        if layer.has_bias and layer.bias is not None and layer.bias.shape != (layer.out_channels,):
            raise StructuralError(f"{net_name}/{layer.id}: bias shape mismatch")
        return ("spatial", layer.out_channels, oh, ow)
    if isinstance(layer, LinearLayer):
        if kind != "flat":
            raise StructuralError(f"{net_name}/{layer.id}: linear layer needs a flat input")
        if state[1] != layer.in_features:
            raise StructuralError(
                f"{net_name}/{layer.id}: input has {state[1]} features, layer expects "
                f"{layer.in_features}"
            )
        if layer.weight is not None and layer.weight.shape != (
            layer.out_features,
            layer.in_features,
        ):
            raise StructuralError(f"{net_name}/{layer.id}: weight shape mismatch")
        return ("flat", layer.out_features)
    if isinstance(layer, (MaxPoolLayer, AvgPoolLayer)):
        c, h, w = spatial()
        if h < layer.kernel or w < layer.kernel:
            raise StructuralError(f"{net_name}/{layer.id}: pool window does not fit")
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        return ("spatial", c, oh, ow)
    if isinstance(layer, ReluLayer):
        return state
    if isinstance(layer, FlattenLayer):
        c, h, w = spatial()
        return ("flat", c * h * w)
    if isinstance(layer, BatchNormLayer):
        c, h, w = spatial()
        if c != layer.channels:
            raise StructuralError(
                f"{net_name}/{layer.id}: {c} input channels vs {layer.channels} "
                "batchnorm channels"
            )
        return state
    raise StructuralError(f"{net_name}/{layer.id}: unknown layer type")


def validate_network(net: NetworkSpec) -> tuple:
    """Check the channel chain end to end; returns the output shape token."""
    if len(net.input_shape) != 3:
        raise StructuralError(f"{net.name}: input_shape must be (C, H, W)")
    state = ("spatial", *map(int, net.input_shape))
    saved = {}
    seen = set()
    for layer in net.layers:
        if layer.id in seen:
            raise StructuralError(f"{net.name}: duplicate layer id {layer.id!r}")
        seen.add(layer.id)
        if isinstance(layer, ResidualBegin):
            saved[layer.tag] = state
            continue
        if isinstance(layer, ResidualAdd):
            if layer.tag not in saved:
                raise StructuralError(
                    f"{net.name}/{layer.id}: no residual_begin with tag {layer.tag!r}"
                )
            branch = saved[layer.tag]
            if layer.shortcut_conv is not None:
                branch = _shape_after(layer.shortcut_conv, branch, net.name)
                if layer.shortcut_bn is not None:
                    branch = _shape_after(layer.shortcut_bn, branch, net.name)
            if branch != state:
                raise StructuralError(
                    f"{net.name}/{layer.id}: residual branch shape {branch} does not "
                    f"match main path {state}"
                )
            continue
        state = _shape_after(layer, state, net.name)
    return state


def param_count(net: NetworkSpec) -> int:
    """Total learnable parameters (conv/linear weights+biases, BN affine)."""
    return sum(layer.param_count() for layer in net.layers)


def flops(net: NetworkSpec, input_shape=None) -> int:
    """Arithmetic operations for one image.

    Convolution and linear layers count one operation per multiply-
    accumulate plus one per bias add; pooling, ReLU, batchnorm and
    residual additions count one per output element.
    """
    shape = tuple(input_shape) if input_shape is not None else tuple(net.input_shape)
    probe = NetworkSpec(net.name, shape, net.layers)
    validate_network(probe)

    total = 0
    state = ("spatial", *map(int, shape))
    saved = {}

    def layer_cost(layer, state_in):
        state_out = _shape_after(layer, state_in, net.name)
        if isinstance(layer, ConvLayer):
            _, m, oh, ow = state_out
            macs = layer.kernel**2 * layer.in_channels * m * oh * ow
            return state_out, macs + (m * oh * ow if layer.has_bias else 0)
        if isinstance(layer, LinearLayer):
            macs = layer.in_features * layer.out_features
            return state_out, macs + (layer.out_features if layer.has_bias else 0)
        if isinstance(layer, (MaxPoolLayer, AvgPoolLayer, BatchNormLayer, ReluLayer)):
            if state_out[0] == "spatial":
                return state_out, state_out[1] * state_out[2] * state_out[3]
            return state_out, state_out[1]
        return state_out, 0

    for layer in net.layers:
        if isinstance(layer, ResidualBegin):
            saved[layer.tag] = state
            continue
        if isinstance(layer, ResidualAdd):
            branch = saved[layer.tag]
            if layer.shortcut_conv is not None:
                branch, cost = layer_cost(layer.shortcut_conv, branch)
                total += cost
                if layer.shortcut_bn is not None:
                    branch, cost = layer_cost(layer.shortcut_bn, branch)
                    total += cost
            # the elementwise addition itself
            total += state[1] * state[2] * state[3] if state[0] == "spatial" else state[1]
            continue
        state, cost = layer_cost(layer, state)
        total += cost
    return total


# ---------------------------------------------------------------------------
# JSON + TDF persistence


def _conv_record(layer: ConvLayer) -> dict:
    return {
        "id": layer.id,
        "type": "conv",
        "in_channels": layer.in_channels,
        "out_channels": layer.out_channels,
        "kernel": layer.kernel,
        "stride": layer.stride,
        "padding": layer.padding,
        "bias": layer.has_bias,
    }


def _bn_record(layer: BatchNormLayer) -> dict:
    return {"id": layer.id, "type": "batchnorm", "channels": layer.channels, "eps": layer.eps}


def _layer_record(layer: Layer) -> dict:
    if isinstance(layer, ConvLayer):
        return _conv_record(layer)
    if isinstance(layer, LinearLayer):
        return {
            "id": layer.id,
            "type": "linear",
            "in_features": layer.in_features,
            "out_features": layer.out_features,
            "bias": layer.has_bias,
        }
    if isinstance(layer, MaxPoolLayer):
        return {"id": layer.id, "type": "maxpool", "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, AvgPoolLayer):
        return {"id": layer.id, "type": "avgpool", "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, ReluLayer):
        return {"id": layer.id, "type": "relu"}
    if isinstance(layer, FlattenLayer):
        return {"id": layer.id, "type": "flatten"}
    if isinstance(layer, BatchNormLayer):
        return _bn_record(layer)
    if isinstance(layer, ResidualBegin):
        return {"id": layer.id, "type": "residual_begin", "tag": layer.tag}
    if isinstance(layer, ResidualAdd):
        rec = {"id": layer.id, "type": "residual_add", "tag": layer.tag}
        if layer.shortcut_conv is not None:
            rec["shortcut_conv"] = _conv_record(layer.shortcut_conv)
        if layer.shortcut_bn is not None:
            rec["shortcut_bn"] = _bn_record(layer.shortcut_bn)
        return rec
    raise StructuralError(f"cannot serialize layer {layer!r}")


def _weight_slots(layer: Layer):
    """(slot name, array) pairs for every attached tensor, buffers included."""
    if isinstance(layer, (ConvLayer, LinearLayer)):
        slots = []
        if layer.weight is not None:
            slots.append(("weight", layer.weight))
        if layer.has_bias and layer.bias is not None:
            slots.append(("bias", layer.bias))
        return slots
    if isinstance(layer, BatchNormLayer):
        return [
            (name, arr)
            for name, arr in (
                ("scale", layer.scale),
                ("shift", layer.shift),
                ("running_mean", layer.running_mean),
                ("running_var", layer.running_var),
            )
            if arr is not None
        ]
    if isinstance(layer, ResidualAdd):
        slots = []
        if layer.shortcut_conv is not None:
            for name, arr in _weight_slots(layer.shortcut_conv):
                slots.append((f"shortcut_conv.{name}", arr))
        if layer.shortcut_bn is not None:
            for name, arr in _weight_slots(layer.shortcut_bn):
                slots.append((f"shortcut_bn.{name}", arr))
        return slots
    return []


def save_network(net: NetworkSpec, directory, filename: str = "net.json") -> str:
    """Write net.json plus one TDF per attached weight tensor; returns json path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for layer in net.layers:
        rec = _layer_record(layer)
        weights = {}
        for slot, arr in _weight_slots(layer):
            fname = f"{layer.id}.{slot}.tdf"
            write_tdf(os.path.join(directory, fname), np.asarray(arr))
            weights[slot] = fname
        if weights:
            rec["weights"] = weights
        records.append(rec)
    doc = {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "bn_eps": BN_EPS,
        "layers": records,
    }
    path = os.path.join(directory, filename)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _attach(layer, weights: dict, base: str, prefix: str = ""):
    for slot, fname in weights.items():
        if not slot.startswith(prefix) or (prefix == "" and "." in slot):
            continue
        name = slot[len(prefix):]
        arr = read_tdf_f64(os.path.join(base, fname))
        if isinstance(layer, (ConvLayer, LinearLayer)):
            if name == "weight":
                layer.weight = arr
            elif name == "bias":
                layer.bias = arr
            else:
                raise DataError(f"unknown weight slot {slot!r}")
        elif isinstance(layer, BatchNormLayer):
            if name not in ("scale", "shift", "running_mean", "running_var"):
                raise DataError(f"unknown weight slot {slot!r}")
            setattr(layer, name, arr)


def _conv_from_record(rec: dict) -> ConvLayer:
    return ConvLayer(
        id=str(rec["id"]),
        in_channels=int(rec["in_channels"]),
        out_channels=int(rec["out_channels"]),
        kernel=int(rec["kernel"]),
        stride=int(rec.get("stride", 1)),
        padding=int(rec.get("padding", 0)),
        has_bias=bool(rec.get("bias", True)),
    )


def _bn_from_record(rec: dict) -> BatchNormLayer:
    return BatchNormLayer(
        id=str(rec["id"]), channels=int(rec["channels"]), eps=float(rec.get("eps", BN_EPS))
    )


def load_network(json_path) -> NetworkSpec:
    """Load net.json and every referenced weight tensor (widened to f64)."""
    if not os.path.isfile(json_path):
        raise DataError(f"missing network description: {json_path}")
    base = os.path.dirname(os.path.abspath(json_path))
    with open(json_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{json_path}: invalid JSON ({exc})") from exc
    layers = []
    try:
        for rec in doc["layers"]:
            kind = rec["type"]
            if kind == "conv":
                layer = _conv_from_record(rec)
            elif kind == "linear":
                layer = LinearLayer(
                    id=str(rec["id"]),
                    in_features=int(rec["in_features"]),
                    out_features=int(rec["out_features"]),
                    has_bias=bool(rec.get("bias", True)),
                )
            elif kind == "maxpool":
                layer = MaxPoolLayer(str(rec["id"]), int(rec["kernel"]), int(rec["stride"]))
            elif kind == "avgpool":
                layer = AvgPoolLayer(str(rec["id"]), int(rec["kernel"]), int(rec["stride"]))
            elif kind == "relu":
                layer = ReluLayer(str(rec["id"]))
            elif kind == "flatten":
                layer = FlattenLayer(str(rec["id"]))
            elif kind == "batchnorm":
                layer = _bn_from_record(rec)
            elif kind == "residual_begin":
                layer = ResidualBegin(str(rec["id"]), str(rec["tag"]))
            elif kind == "residual_add":
                layer = ResidualAdd(
                    id=str(rec["id"]),
                    tag=str(rec["tag"]),
                    shortcut_conv=(
                        _conv_from_record(rec["shortcut_conv"])
                        if "shortcut_conv" in rec
                        else None
                    ),
                    shortcut_bn=(
                        _bn_from_record(rec["shortcut_bn"]) if "shortcut_bn" in rec else None
                    ),
                )
            else:
                raise DataError(f"{json_path}: unknown layer type {kind!r}")
            weights = rec.get("weights", {})
            if isinstance(layer, ResidualAdd):
                if layer.shortcut_conv is not None:
                    _attach(layer.shortcut_conv, weights, base, "shortcut_conv.")
                if layer.shortcut_bn is not None:
                    _attach(layer.shortcut_bn, weights, base, "shortcut_bn.")
            else:
                _attach(layer, weights, base)
            layers.append(layer)
    except KeyError as exc:
        raise DataError(f"{json_path}: layer record missing field {exc}") from exc
    try:
        input_shape = tuple(int(x) for x in doc["input_shape"])
    except KeyError as exc:
        raise DataError(f"{json_path}: missing input_shape") from exc
    return NetworkSpec(name=str(doc.get("name", "net")), input_shape=input_shape, layers=layers)
