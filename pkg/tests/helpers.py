"""Shared random-instance generators for the test suite."""

import numpy as np

from entroprune.dumps import ConvGeometry, LayerDump
from entroprune.lift import RegressionDataset


def lifted_geometry(channels, k, out_channels):
    return ConvGeometry(kernel=k, stride=1, padding=k // 2,
                        in_channels=channels, out_channels=out_channels)


def make_dataset(features, responses, geometry):
    n = features.shape[1]
    origin = np.zeros((n, 3), dtype=np.int64)
    origin[:, 2] = np.arange(n)
    # origin triples are synthetic here; only shape matters for solver tests
    return RegressionDataset(features=features, responses=responses,
                             geometry=geometry, origin=origin)


def planted_dataset(rng, channels=16, k=3, out_channels=8, n=2000,
                    support_size=4, noise=0.01, intercept=True):
    """Responses generated from a random kernel supported on a few channels."""
    k2 = k * k
    features = rng.standard_normal((k2 * channels, n))
    support = sorted(rng.choice(channels, size=support_size, replace=False).tolist())
    kernel_rows = np.zeros((out_channels, k2 * channels))
    for d in support:
        kernel_rows[:, d * k2:(d + 1) * k2] = rng.standard_normal((out_channels, k2))
    bias = rng.standard_normal(out_channels) if intercept else np.zeros(out_channels)
    responses = kernel_rows @ features + bias[:, None]
    if noise > 0:
        responses = responses + noise * rng.standard_normal(responses.shape)
    data = make_dataset(features, responses, lifted_geometry(channels, k, out_channels))
    return data, support, kernel_rows, bias


def random_dataset(rng, channels=4, k=3, out_channels=2, n=100, structured=True):
    """A generic random instance; `structured` mixes in a learnable signal."""
    k2 = k * k
    features = rng.standard_normal((k2 * channels, n))
    if structured:
        rows = rng.standard_normal((out_channels, k2 * channels))
        responses = rows @ features + 0.1 * rng.standard_normal((out_channels, n))
    else:
        responses = rng.standard_normal((out_channels, n))
    return make_dataset(features, responses, lifted_geometry(channels, k, out_channels))


def random_dump(rng, samples=2, channels=2, h=6, w=6, k=3, stride=1, padding=None,
                out_channels=3):
    """A LayerDump whose outputs really are a convolution of its inputs."""
    from oracles import conv_forward_loops

    if padding is None:
        padding = k // 2
    x = rng.standard_normal((samples, channels, h, w))
    kernels = rng.standard_normal((channels, out_channels, k, k))
    bias = rng.standard_normal(out_channels)
    y = conv_forward_loops(x, kernels, bias, stride=stride, padding=padding)
    geometry = ConvGeometry(kernel=k, stride=stride, padding=padding,
                            in_channels=channels, out_channels=out_channels)
    dump = LayerDump(layer_id="test", geometry=geometry, inputs=x, outputs=y)
    return dump, kernels, bias
