"""Rebuild a trainable PyTorch model from net.json + weight TDFs.

The result interprets the layer records directly (one module per record),
so anything the toolkit can describe, including pruned widths and
residual blocks with shortcut convs, comes back as a trainable module
whose forward matches the toolkit evaluator.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch
import torch.nn as nn

from .tdf import read_tdf


def _key(layer_id: str) -> str:
    return layer_id.replace(".", "__")


def _load_conv(rec: dict, weights: dict, base: str) -> nn.Conv2d:
    conv = nn.Conv2d(
        rec["in_channels"], rec["out_channels"], rec["kernel"],
        stride=rec.get("stride", 1), padding=rec.get("padding", 0),
        bias=bool(rec.get("bias", True)),
    )
    if "weight" in weights:
        arr = np.array(read_tdf(os.path.join(base, weights["weight"])))
        want = (rec["in_channels"], rec["out_channels"], rec["kernel"], rec["kernel"])
        if arr.shape != want:
            raise ValueError(
                f"{rec['id']}: kernel tensor has shape {arr.shape}, record says {want}"
            )
        # wire format (D, M, k, k) -> torch (M, D, k, k)
        conv.weight.data = torch.from_numpy(
            np.ascontiguousarray(arr.transpose(1, 0, 2, 3), dtype=np.float32)
        )
    if conv.bias is not None and "bias" in weights:
        conv.bias.data = torch.from_numpy(
            np.array(read_tdf(os.path.join(base, weights["bias"])), dtype=np.float32)
        )
    return conv


def _load_bn(rec: dict, weights: dict, base: str, prefix: str = "") -> nn.BatchNorm2d:
    bn = nn.BatchNorm2d(rec["channels"], eps=float(rec.get("eps", 1e-5)))
    mapping = {"scale": "weight", "shift": "bias", "running_mean": "running_mean",
               "running_var": "running_var"}
    for slot, attr in mapping.items():
        fname = weights.get(prefix + slot)
        if fname is not None:
            arr = torch.from_numpy(
                np.array(read_tdf(os.path.join(base, fname)), dtype=np.float32)
            )
            getattr(bn, attr).data = arr
    return bn


class SpecNet(nn.Module):
    """A network driven by its layer-record list."""

    def __init__(self, records: list, modules: dict):
        super().__init__()
        self.records = records
        self.blocks = nn.ModuleDict(modules)

    def forward(self, x):
        saved = {}
        for rec in self.records:
            kind = rec["type"]
            if kind == "residual_begin":
                saved[rec["tag"]] = x
            elif kind == "residual_add":
                branch = saved[rec["tag"]]
                sc_key = _key(rec["id"]) + "__shortcut"
                if sc_key in self.blocks:
                    branch = self.blocks[sc_key](branch)
                x = x + branch
            else:
                x = self.blocks[_key(rec["id"])](x)
        return x


def import_pruned(net_json_path) -> SpecNet:
    """net.json (+ referenced TDFs) -> trainable torch module."""
    base = os.path.dirname(os.path.abspath(net_json_path))
    with open(net_json_path) as fh:
        doc = json.load(fh)
    records = doc["layers"]
    modules: dict[str, nn.Module] = {}
    for rec in records:
        kind = rec["type"]
        weights = rec.get("weights", {})
        key = _key(rec["id"])
        if kind == "conv":
            modules[key] = _load_conv(rec, weights, base)
        elif kind == "linear":
            lin = nn.Linear(rec["in_features"], rec["out_features"],
                            bias=bool(rec.get("bias", True)))
            if "weight" in weights:
                arr = np.array(read_tdf(os.path.join(base, weights["weight"])),
                               dtype=np.float32)
                want = (rec["out_features"], rec["in_features"])
                if arr.shape != want:
                    raise ValueError(
                        f"{rec['id']}: weight has shape {arr.shape}, record says {want}"
                    )
                lin.weight.data = torch.from_numpy(arr)
            if lin.bias is not None and "bias" in weights:
                lin.bias.data = torch.from_numpy(
                    np.array(read_tdf(os.path.join(base, weights["bias"])),
                               dtype=np.float32)
                )
            modules[key] = lin
        elif kind == "maxpool":
            modules[key] = nn.MaxPool2d(rec["kernel"], rec["stride"])
        elif kind == "avgpool":
            modules[key] = nn.AvgPool2d(rec["kernel"], rec["stride"])
        elif kind == "relu":
            modules[key] = nn.ReLU()
        elif kind == "flatten":
            modules[key] = nn.Flatten()
        elif kind == "batchnorm":
            modules[key] = _load_bn(rec, weights, base)
        elif kind == "residual_begin":
            pass
        elif kind == "residual_add":
            if "shortcut_conv" in rec:
                parts: list[nn.Module] = [
                    _load_conv(rec["shortcut_conv"],
                               {k.split(".", 1)[1]: v for k, v in weights.items()
                                if k.startswith("shortcut_conv.")}, base)
                ]
                if "shortcut_bn" in rec:
                    parts.append(_load_bn(rec["shortcut_bn"], weights, base,
                                          prefix="shortcut_bn."))
                modules[key + "__shortcut"] = nn.Sequential(*parts)
        else:
            raise ValueError(f"unknown layer type {kind!r} in {net_json_path}")
    # inference mode by default: batchnorm must use the imported running
    # statistics until a training recipe flips it back
    net = SpecNet(records, modules).eval()
    shape = doc.get("input_shape")
    if shape:
        try:
            with torch.no_grad():
                net(torch.zeros(1, *map(int, shape)))
        except RuntimeError as exc:
            raise ValueError(
                f"{net_json_path}: channel chain mismatch in the imported "
                f"network ({exc})"
            ) from exc
    return net


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="rebuild a trainable model from net.json")
    parser.add_argument("net_json")
    parser.add_argument("--save", default=None, help="write the state dict here (.pt)")
    args = parser.parse_args(argv)
    model = import_pruned(args.net_json)
    params = sum(p.numel() for p in model.parameters())
    print(f"parameters={params}")
    if args.save:
        torch.save(model.state_dict(), args.save)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
