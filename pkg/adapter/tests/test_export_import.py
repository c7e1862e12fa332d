import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import torch.nn as nn

from entroprune_torch import (
    build_lenet,
    build_resnet18,
    build_vgg16,
    export_model,
    import_pruned,
)

# the toolkit is the oracle for cross-implementation checks; the adapter's
# production code talks to it only through files and the CLI
import entroprune


def _torch_params(model):
    return sum(p.numel() for p in model.parameters())


def test_export_writes_t500_dumps(tmp_path):
    torch.manual_seed(0)
    model = build_lenet()
    images = np.random.default_rng(0).standard_normal((800, 1, 28, 28)).astype(np.float32)
    manifest = export_model(model, images, tmp_path, name="lenet", samples=500,
                            layer_ids=["conv1", "fc1"], seed=3)
    assert manifest["samples"] == 500
    from entroprune_torch.tdf import read_tdf
    x = read_tdf(tmp_path / "dumps" / "conv1" / "X.tdf")
    assert x.shape[0] == 500 and x.dtype == np.float32
    fc1 = read_tdf(tmp_path / "dumps" / "fc1" / "X.tdf")
    assert fc1.shape == (500, 16, 5, 5)
    net_ids = {rec["id"] for rec in json.loads((tmp_path / "net.json").read_text())["layers"]}
    assert set(manifest["dumped_layers"]) <= net_ids


def test_exported_net_matches_torch_forward(tmp_path):
    torch.manual_seed(1)
    model = build_lenet()
    rng = np.random.default_rng(1)
    images = rng.standard_normal((100, 1, 28, 28)).astype(np.float32)
    export_model(model, images, tmp_path, name="lenet", samples=100)
    net = entroprune.load_network(tmp_path / "net.json")
    entroprune.validate_network(net)
    assert entroprune.param_count(net) == _torch_params(model) == 61706
    with torch.no_grad():
        want = model(torch.from_numpy(images)).numpy()
    got = entroprune.forward(net, images)
    assert np.max(np.abs(got - want)) < 1e-4


def test_reexport_same_seed_is_bit_identical(tmp_path):
    torch.manual_seed(2)
    model = build_lenet()
    images = np.random.default_rng(2).standard_normal((600, 1, 28, 28)).astype(np.float32)
    a, b = tmp_path / "a", tmp_path / "b"
    export_model(model, images, a, samples=500, layer_ids=["conv1"], seed=11)
    export_model(model, images, b, samples=500, layer_ids=["conv1"], seed=11)
    for rel in ("net.json", "conv1.weight.tdf", "dumps/conv1/X.tdf", "dumps/conv1/Y.tdf"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_export_refuses_unsupported_layers(tmp_path):
    model = nn.Sequential(nn.Conv2d(1, 2, 3), nn.Sigmoid())
    images = np.zeros((4, 1, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="Sigmoid"):
        export_model(model, images, tmp_path)


def test_import_baseline_round_trip(tmp_path):
    torch.manual_seed(3)
    model = build_lenet()
    rng = np.random.default_rng(3)
    images = rng.standard_normal((50, 1, 28, 28)).astype(np.float32)
    export_model(model, images, tmp_path, samples=50)
    rebuilt = import_pruned(tmp_path / "net.json")
    assert _torch_params(rebuilt) == _torch_params(model)
    with torch.no_grad():
        want = model(torch.from_numpy(images)).numpy()
        got = rebuilt(torch.from_numpy(images)).numpy()
    assert np.max(np.abs(got - want)) < 1e-4


def test_import_halved_lenet_param_count(tmp_path):
    torch.manual_seed(4)
    model = build_lenet(conv1_out=8)
    images = np.random.default_rng(4).standard_normal((20, 1, 28, 28)).astype(np.float32)
    export_model(model, images, tmp_path, samples=20)
    rebuilt = import_pruned(tmp_path / "net.json")
    assert _torch_params(rebuilt) == 36498


def test_full_prune_cycle_through_cli(tmp_path):
    torch.manual_seed(5)
    model = build_lenet()
    with torch.no_grad():
        model.conv1.weight[10:] = 0.0
        model.conv1.bias[10:] = 0.0
    rng = np.random.default_rng(5)
    images = rng.standard_normal((700, 1, 28, 28)).astype(np.float32)
    export_dir = tmp_path / "export"
    export_model(model, images, export_dir, name="lenet", samples=500,
                 layer_ids=["fc1"], seed=0)
    out = tmp_path / "pruned"
    proc = subprocess.run(
        [sys.executable, "-m", "entroprune.cli", "sparsify-net",
         str(export_dir / "dumps"), str(export_dir / "net.json"),
         "--out", str(out), "--json"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads((out / "report.json").read_text())

    rebuilt = import_pruned(out / "pruned_net.json")
    assert _torch_params(rebuilt) == report["totals"]["params_after"]
    assert _torch_params(rebuilt) < 61706

    # dead conv1 filters must be gone
    pruned_net = entroprune.load_network(out / "pruned_net.json")
    assert pruned_net.layer_by_id("conv1").out_channels <= 10

    test_images = rng.standard_normal((40, 1, 28, 28)).astype(np.float32)
    with torch.no_grad():
        got = rebuilt(torch.from_numpy(test_images)).numpy()
    want = entroprune.forward(pruned_net, test_images)
    assert np.max(np.abs(got - want)) < 1e-4


def test_vgg_export_param_count(tmp_path):
    torch.manual_seed(6)
    model = build_vgg16()
    model.eval()
    images = np.random.default_rng(6).standard_normal((4, 3, 32, 32)).astype(np.float32)
    export_model(model, images, tmp_path, name="vgg16", samples=4)
    net = entroprune.load_network(tmp_path / "net.json")
    assert entroprune.param_count(net) == _torch_params(model) == 14728266


def test_resnet_export_import_round_trip(tmp_path):
    torch.manual_seed(7)
    model = build_resnet18()
    model.eval()
    rng = np.random.default_rng(7)
    images = rng.standard_normal((6, 3, 32, 32)).astype(np.float32)
    export_model(model, images, tmp_path, name="resnet18", samples=6)
    net = entroprune.load_network(tmp_path / "net.json")
    entroprune.validate_network(net)
    assert entroprune.param_count(net) == _torch_params(model) == 11173962
    with torch.no_grad():
        want = model(torch.from_numpy(images)).numpy()
    got = entroprune.forward(net, images)
    assert np.max(np.abs(got - want)) < 1e-3  # deeper net, looser f32 drift
    rebuilt = import_pruned(tmp_path / "net.json")
    with torch.no_grad():
        again = rebuilt(torch.from_numpy(images)).numpy()
    assert np.max(np.abs(again - want)) < 1e-4


def test_import_rejects_weight_record_mismatch(tmp_path):
    torch.manual_seed(8)
    model = build_lenet()
    images = np.random.default_rng(8).standard_normal((8, 1, 28, 28)).astype(np.float32)
    export_model(model, images, tmp_path, samples=8)
    doc = json.loads((tmp_path / "net.json").read_text())
    for rec in doc["layers"]:
        if rec["id"] == "fc2":
            rec["in_features"] = 77
    (tmp_path / "net.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="record says"):
        import_pruned(tmp_path / "net.json")


def test_import_rejects_broken_channel_chain(tmp_path):
    torch.manual_seed(9)
    model = build_lenet()
    images = np.random.default_rng(9).standard_normal((8, 1, 28, 28)).astype(np.float32)
    export_model(model, images, tmp_path, samples=8)
    doc = json.loads((tmp_path / "net.json").read_text())
    for rec in doc["layers"]:
        if rec["id"] == "fc2":
            # records and weights agree with each other but not with fc1
            rec["in_features"] = 77
            rec.pop("weights", None)
    (tmp_path / "net.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="channel chain"):
        import_pruned(tmp_path / "net.json")
