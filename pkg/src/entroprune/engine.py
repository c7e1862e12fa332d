"""Minimal deterministic forward-pass evaluator for NetworkSpec models.

Everything runs in float64 on the CPU. Convolution is implemented by
gathering input windows and multiplying with the vectorized kernels, the
same lifting the sparsifier uses, so the two code paths agree to roundoff.
"""

from __future__ import annotations

import numpy as np

from .dumps import ConvGeometry, LayerDump
from .errors import StructuralError
from .lift import vectorize_kernels
from .network import (
    AvgPoolLayer,
    BatchNormLayer,
    ConvLayer,
    FlattenLayer,
    LinearLayer,
    MaxPoolLayer,
    NetworkSpec,
    ReluLayer,
    ResidualAdd,
    ResidualBegin,
)


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Strided, zero-padded cross-correlation with per-output-channel bias."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise StructuralError(
            f"{layer.id}: input shape {x.shape} does not match {layer.in_channels} channels"
        )
    if layer.weight is None:
        raise StructuralError(f"{layer.id}: no kernel attached")
    n, _, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise StructuralError(f"{layer.id}: kernel does not fit {h}x{w} input")
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]  # (N, D, oh, ow, k, k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
    out = cols @ vectorize_kernels(layer.weight).T  # (N*oh*ow, M)
    if layer.has_bias and layer.bias is not None:
        out = out + layer.bias
    return out.reshape(n, oh, ow, layer.out_channels).transpose(0, 3, 1, 2)


def _pool(x: np.ndarray, kernel: int, stride: int, reduce_fn) -> np.ndarray:
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise StructuralError(f"pool window {kernel} does not fit {h}x{w} input")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return reduce_fn(windows[:, :, ::stride, ::stride], axis=(-2, -1))


def _bn_inference(layer: BatchNormLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise StructuralError(f"{layer.id}: batchnorm expects {layer.channels} channels")
    if any(t is None for t in (layer.scale, layer.shift, layer.running_mean, layer.running_var)):
        raise StructuralError(f"{layer.id}: batchnorm tensors missing")
    inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
    shape = (1, layer.channels, 1, 1)
    return (x - layer.running_mean.reshape(shape)) * (layer.scale * inv).reshape(shape) \
        + layer.shift.reshape(shape)


def _apply(layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, ConvLayer):
        return conv_forward(layer, x)
    if isinstance(layer, LinearLayer):
        if x.ndim != 2 or x.shape[1] != layer.in_features:
            raise StructuralError(
                f"{layer.id}: linear layer expects flat {layer.in_features}-feature input, "
                f"got shape {x.shape}"
            )
        if layer.weight is None:
            raise StructuralError(f"{layer.id}: no weight attached")
        out = x @ layer.weight.T
        if layer.has_bias and layer.bias is not None:
            out = out + layer.bias
        return out
    if isinstance(layer, ReluLayer):
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPoolLayer):
        return _pool(x, layer.kernel, layer.stride, np.max)
    if isinstance(layer, AvgPoolLayer):
        return _pool(x, layer.kernel, layer.stride, np.mean)
    if isinstance(layer, FlattenLayer):
        if x.ndim != 4:
            raise StructuralError(f"{layer.id}: flatten expects a spatial input")
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, BatchNormLayer):
        return _bn_inference(layer, x)
    raise StructuralError(f"{layer.id}: unsupported layer type in forward pass")


def _run(net: NetworkSpec, batch: np.ndarray, taps: dict | None = None) -> np.ndarray:
    """Forward pass; if `taps` maps layer ids to slots, record (input, raw output)
    of those conv/linear layers (output before batchnorm and nonlinearity)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise StructuralError(f"batch must be (N, C, H, W), got shape {x.shape}")
    if x.shape[1:] != tuple(net.input_shape):
        raise StructuralError(
            f"batch shape {x.shape[1:]} does not match network input {tuple(net.input_shape)}"
        )
    saved = {}
    pre_flatten = None  # spatial activation consumed by the previous layer iff flatten
    for layer in net.layers:
        if isinstance(layer, ResidualBegin):
            saved[layer.tag] = x
            continue
        if isinstance(layer, ResidualAdd):
            if layer.tag not in saved:
                raise StructuralError(f"{layer.id}: no saved activation for tag {layer.tag!r}")
            branch = saved[layer.tag]
            if layer.shortcut_conv is not None:
                branch = conv_forward(layer.shortcut_conv, branch)
                if layer.shortcut_bn is not None:
                    branch = _bn_inference(layer.shortcut_bn, branch)
            if branch.shape != x.shape:
                raise StructuralError(
                    f"{layer.id}: branch shape {branch.shape} vs main path {x.shape}"
                )
            x = x + branch
            pre_flatten = None
            continue
        y = _apply(layer, x)
        if taps is not None and layer.id in taps:
            if isinstance(layer, ConvLayer):
                taps[layer.id] = (x, y)
            elif isinstance(layer, LinearLayer):
                # a linear layer fed by a flatten of a square, odd-extent map
                # is captured as a window regression over the map's channels
                src = None
                if pre_flatten is not None:
                    _, _, h, w = pre_flatten.shape
                    if h == w and h % 2 == 1:
                        src = pre_flatten
                if src is None:
                    src = x.reshape(x.shape[0], x.shape[1], 1, 1)
                taps[layer.id] = (src, y.reshape(y.shape[0], y.shape[1], 1, 1))
            else:
                raise StructuralError(f"{layer.id}: dumps only capture conv/linear layers")
        pre_flatten = x if isinstance(layer, FlattenLayer) else None
        x = y
    return x


def forward(net: NetworkSpec, batch: np.ndarray) -> np.ndarray:
    """Logits (or final activation) for a batch shaped (N, C, H, W)."""
    return _run(net, batch)


class EvalDataset:
    """Images (N, C, H, W) with integer class labels (N,)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels)
        if images.ndim != 4:
            raise StructuralError(f"images must be 4-d, got shape {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise StructuralError(
                f"{labels.shape[0] if labels.ndim == 1 else '?'} labels for "
                f"{images.shape[0]} images"
            )
        if labels.size and labels.min() < 0:
            raise StructuralError("labels must be nonnegative class indices")
        self.images = images
        self.labels = labels.astype(np.int64)

    def __len__(self):
        return self.images.shape[0]


def evaluate(net: NetworkSpec, data: EvalDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of the network on the dataset."""
    hits = 0
    for start in range(0, len(data), batch_size):
        logits = forward(net, data.images[start : start + batch_size])
        hits += int((np.argmax(logits, axis=1) == data.labels[start : start + batch_size]).sum())
    return hits / len(data)


def capture_dumps(net: NetworkSpec, data, layer_ids) -> list[LayerDump]:
    """Run the network once and record per-layer regression material.

    For each requested conv/linear layer: X is the activation entering the
    layer, Y its raw output before batchnorm and nonlinearity. A linear
    layer directly after a flatten of a square odd-extent feature map is
    captured in its window-regression form (channels x k x k); other linear
    layers are captured as 1x1 geometry.
    """
    images = data.images if isinstance(data, EvalDataset) else np.asarray(data)
    taps = {}
    for lid in layer_ids:
        layer = net.layer_by_id(lid)
        if not isinstance(layer, (ConvLayer, LinearLayer)):
            raise StructuralError(f"{lid}: dumps only capture conv/linear layers")
        taps[lid] = None
    _run(net, images, taps)

    dumps = []
    for lid in layer_ids:
        x, y = taps[lid]
        layer = net.layer_by_id(lid)
        if isinstance(layer, ConvLayer):
            geometry = ConvGeometry(
                kernel=layer.kernel,
                stride=layer.stride,
                padding=layer.padding,
                in_channels=layer.in_channels,
                out_channels=layer.out_channels,
            )
        else:
            window = x.shape[2]
            geometry = ConvGeometry(
                kernel=window,
                stride=1,
                padding=0,
                in_channels=x.shape[1],
                out_channels=layer.out_features,
            )
        dumps.append(LayerDump(layer_id=lid, geometry=geometry, inputs=x, outputs=y))
    return dumps
