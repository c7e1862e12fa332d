"""Reference architectures used as fixtures and for end-to-end tests.

Channel widths are parameters so pruned variants (halved conv widths,
narrowed fully connected stacks) can be described with the same builders.
"""

from __future__ import annotations

import numpy as np

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

VGG16_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
#: maxpool follows the conv at these indices
_VGG_POOL_AFTER = {1, 3, 6, 9, 12}


def build_lenet(conv1_out: int = 16, fc1_out: int = 120, fc2_out: int = 84,
                num_classes: int = 10) -> NetworkSpec:
    """LeNet for 1x28x28 inputs: two 5x5 conv+avgpool stages, three linear layers.

    With default widths: 61,706 parameters. `conv1_out` also resizes the
    first linear layer's input (25 features per surviving channel).
    """
    layers = [
        ConvLayer("conv0", 1, 6, kernel=5, padding=2),
        ReluLayer("relu0"),
        AvgPoolLayer("pool0", 2, 2),
        ConvLayer("conv1", 6, conv1_out, kernel=5, padding=0),
        ReluLayer("relu1"),
        AvgPoolLayer("pool1", 2, 2),
        FlattenLayer("flatten"),
        LinearLayer("fc1", 25 * conv1_out, fc1_out),
        ReluLayer("relu2"),
        LinearLayer("fc2", fc1_out, fc2_out),
        ReluLayer("relu3"),
        LinearLayer("fc3", fc2_out, num_classes),
    ]
    return NetworkSpec("lenet", (1, 28, 28), layers)


def build_vgg16(widths=VGG16_WIDTHS, num_classes: int = 10) -> NetworkSpec:
    """VGG-16 variant for 3x32x32 inputs: 13 conv+BN+ReLU blocks, one classifier.

    With default widths: 14,728,266 parameters (batchnorm affine included).
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) != 13:
        raise ValueError(f"need 13 conv widths, got {len(widths)}")
    layers = []
    in_ch = 3
    pool = 0
    for i, out_ch in enumerate(widths):
        layers.append(ConvLayer(f"conv{i}", in_ch, out_ch, kernel=3, padding=1))
        layers.append(BatchNormLayer(f"bn{i}", out_ch))
        layers.append(ReluLayer(f"relu{i}"))
        if i in _VGG_POOL_AFTER:
            layers.append(MaxPoolLayer(f"pool{pool}", 2, 2))
            pool += 1
        in_ch = out_ch
    layers.append(FlattenLayer("flatten"))
    layers.append(LinearLayer("fc", widths[-1], num_classes))
    return NetworkSpec("vgg16", (3, 32, 32), layers)


def build_resnet18(num_classes: int = 10) -> NetworkSpec:
    """ResNet-18 for 3x32x32 inputs: 11,173,962 parameters.

    Convolutions carry no bias; every conv (shortcuts included) is followed
    by affine batchnorm. Blocks that change width or stride get a 1x1
    shortcut conv + batchnorm.
    """
    layers = [
        ConvLayer("conv0", 3, 64, kernel=3, padding=1, has_bias=False),
        BatchNormLayer("bn0", 64),
        ReluLayer("relu0"),
    ]
    plan = [  # (conv_a id, in, out, stride of first conv)
        (1, 64, 64, 1), (3, 64, 64, 1),
        (5, 64, 128, 2), (7, 128, 128, 1),
        (9, 128, 256, 2), (11, 256, 256, 1),
        (13, 256, 512, 2), (15, 512, 512, 1),
    ]
    for first, in_ch, out_ch, stride in plan:
        tag = f"block{first}"
        layers.append(ResidualBegin(f"save{first}", tag))
        layers.append(ConvLayer(f"conv{first}", in_ch, out_ch, kernel=3,
                                stride=stride, padding=1, has_bias=False))
        layers.append(BatchNormLayer(f"bn{first}", out_ch))
        layers.append(ReluLayer(f"relu{first}"))
        layers.append(ConvLayer(f"conv{first + 1}", out_ch, out_ch, kernel=3,
                                padding=1, has_bias=False))
        layers.append(BatchNormLayer(f"bn{first + 1}", out_ch))
        shortcut_conv = None
        shortcut_bn = None
        if stride != 1 or in_ch != out_ch:
            shortcut_conv = ConvLayer(f"conv{first}_shortcut", in_ch, out_ch,
                                      kernel=1, stride=stride, has_bias=False)
            shortcut_bn = BatchNormLayer(f"bn{first}_shortcut", out_ch)
        layers.append(ResidualAdd(f"add{first}", tag, shortcut_conv, shortcut_bn))
        layers.append(ReluLayer(f"relu{first + 1}"))
    layers.append(AvgPoolLayer("pool", 4, 4))
    layers.append(FlattenLayer("flatten"))
    layers.append(LinearLayer("fc", 512, num_classes))
    return NetworkSpec("resnet18", (3, 32, 32), layers)


def _fill(layer, rng: np.random.Generator, scale: float):
    from .network import ConvLayer, LinearLayer, BatchNormLayer

    if isinstance(layer, ConvLayer):
        fan_in = layer.kernel**2 * layer.in_channels
        layer.weight = rng.standard_normal(
            (layer.in_channels, layer.out_channels, layer.kernel, layer.kernel)
        ) * (scale / np.sqrt(fan_in))
        if layer.has_bias:
            layer.bias = rng.standard_normal(layer.out_channels) * 0.1 * scale
    elif isinstance(layer, LinearLayer):
        layer.weight = rng.standard_normal(
            (layer.out_features, layer.in_features)
        ) * (scale / np.sqrt(layer.in_features))
        if layer.has_bias:
            layer.bias = rng.standard_normal(layer.out_features) * 0.1 * scale
    elif isinstance(layer, BatchNormLayer):
        layer.scale = 1.0 + 0.1 * rng.standard_normal(layer.channels)
        layer.shift = 0.1 * rng.standard_normal(layer.channels)
        layer.running_mean = 0.1 * rng.standard_normal(layer.channels)
        layer.running_var = 1.0 + 0.1 * rng.random(layer.channels)


def attach_random_weights(net: NetworkSpec, seed: int = 0, scale: float = 1.0) -> NetworkSpec:
    """Fill every weight slot in place with seeded random values; returns net."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, ResidualAdd):
            if layer.shortcut_conv is not None:
                _fill(layer.shortcut_conv, rng, scale)
            if layer.shortcut_bn is not None:
                _fill(layer.shortcut_bn, rng, scale)
        else:
            _fill(layer, rng, scale)
    return net
