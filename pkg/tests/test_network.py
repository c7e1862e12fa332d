import numpy as np
import pytest

from entroprune.errors import StructuralError
from entroprune.fixtures import (
    attach_random_weights,
    build_lenet,
    build_resnet18,
    build_vgg16,
)
from entroprune.network import (
    ConvLayer,
    FlattenLayer,
    LinearLayer,
    MaxPoolLayer,
    NetworkSpec,
    ReluLayer,
    flops,
    load_network,
    param_count,
    save_network,
    validate_network,
)

TABLE2_CONV_ALL_FC = (29, 64, 124, 127, 250, 232, 219, 65, 24, 12, 10, 12, 91)


def test_lenet_param_count_total_and_conv1():
    net = build_lenet()
    validate_network(net)
    assert param_count(net) == 61706
    assert net.layer_by_id("conv1").param_count() == 2416


def test_vgg16_param_count():
    net = build_vgg16()
    validate_network(net)
    assert param_count(net) == 14728266


def test_resnet18_param_count():
    net = build_resnet18()
    validate_network(net)
    assert param_count(net) == 11173962


def test_pruned_fixture_param_counts():
    assert param_count(build_lenet(conv1_out=8)) == 36498
    assert param_count(build_lenet(conv1_out=4)) == 23894
    assert param_count(build_lenet(8, 104, 43)) == 27223
    assert param_count(build_lenet(8, 40, 18)) == 10332
    assert param_count(build_vgg16(TABLE2_CONV_ALL_FC)) == pytest.approx(1.66e6, rel=0.005)


def _random_net(rng):
    layers = []
    c = int(rng.integers(1, 4))
    h = w = int(rng.integers(8, 13))
    in_shape = (c, h, w)
    n_conv = int(rng.integers(1, 4))
    for i in range(n_conv):
        out = int(rng.integers(1, 6))
        k = int(rng.choice([1, 3]))
        layers.append(ConvLayer(f"conv{i}", c, out, kernel=k, padding=k // 2,
                                has_bias=bool(rng.integers(0, 2))))
        layers.append(ReluLayer(f"relu{i}"))
        c = out
    layers.append(FlattenLayer("flatten"))
    feat = c * h * w
    for i in range(int(rng.integers(1, 3))):
        out = int(rng.integers(2, 8))
        layers.append(LinearLayer(f"fc{i}", feat, out, has_bias=bool(rng.integers(0, 2))))
        feat = out
    return NetworkSpec("rand", in_shape, layers)


def test_param_count_matches_element_enumeration():
    # brute force: count every element of every attached parameter tensor
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = attach_random_weights(_random_net(rng), seed=seed)
        validate_network(net)
        brute = sum(t.size for layer in net.layers for t in layer.param_tensors())
        assert param_count(net) == brute


def test_param_count_matches_enumeration_on_fixtures():
    for build in (build_lenet, build_vgg16, build_resnet18):
        net = attach_random_weights(build(), seed=3)
        brute = sum(t.size for layer in net.layers for t in layer.param_tensors())
        assert param_count(net) == brute


def test_flops_single_multiply_accumulate():
    net = NetworkSpec("one", (1, 1, 1), [ConvLayer("c", 1, 1, kernel=1, has_bias=False)])
    assert flops(net) == 1
    with_bias = NetworkSpec("one", (1, 1, 1), [ConvLayer("c", 1, 1, kernel=1)])
    assert flops(with_bias) == 2


def test_flops_conv_formula_against_loop_count():
    # count multiply-accumulates by literally iterating the conv loops
    net = build_lenet()
    conv1 = net.layer_by_id("conv1")
    macs = 0
    for _ in range(conv1.out_channels):
        for _ in range(10):  # output rows of conv1 on 14x14 input
            for _ in range(10):
                macs += conv1.kernel**2 * conv1.in_channels
    assert macs == 240000
    only = NetworkSpec("l", (6, 14, 14), [ConvLayer("c", 6, 16, 5, has_bias=False)])
    assert flops(only) == macs


def test_vgg_flops_near_paper_values():
    assert flops(build_vgg16()) == pytest.approx(3.14e8, rel=0.05)
    assert flops(build_vgg16(TABLE2_CONV_ALL_FC)) == pytest.approx(1.57e8, rel=0.05)


def test_validate_rejects_channel_breaks():
    net = build_lenet()
    net.layer_by_id("conv1").in_channels = 7
    with pytest.raises(StructuralError, match="conv1"):
        validate_network(net)


def test_validate_rejects_bad_linear_width():
    net = build_lenet()
    net.layer_by_id("fc2").in_features = 121
    with pytest.raises(StructuralError, match="fc2"):
        validate_network(net)


def test_network_json_round_trip(tmp_path):
    net = attach_random_weights(build_lenet(), seed=11)
    path = save_network(net, tmp_path)
    back = load_network(path)
    validate_network(back)
    assert param_count(back) == param_count(net)
    for a, b in zip(net.layers, back.layers):
        assert a.id == b.id and type(a) is type(b)
        if hasattr(a, "weight") and a.weight is not None:
            assert np.array_equal(a.weight, b.weight)


def test_resnet_json_round_trip_keeps_shortcuts(tmp_path):
    net = attach_random_weights(build_resnet18(), seed=5)
    path = save_network(net, tmp_path)
    back = load_network(path)
    validate_network(back)
    assert param_count(back) == 11173962
    add = next(l for l in back.layers if l.id == "add5")
    assert add.shortcut_conv is not None and add.shortcut_conv.weight is not None
    assert add.shortcut_bn is not None and add.shortcut_bn.scale is not None
