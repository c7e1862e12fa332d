"""Export a PyTorch model into the toolkit's net.json / TDF / dump formats.

The exporter understands plain ``nn.Sequential`` stacks of Conv2d, Linear,
MaxPool2d, AvgPool2d, ReLU, BatchNorm2d and Flatten, plus the local
BasicBlock residual module; anything else is refused by name. Dump tap
points mirror the toolkit's evaluator: X is the activation entering a
layer, Y its raw output before batchnorm and nonlinearity, and a linear
layer directly behind a flatten of a square odd-extent map is dumped in
window-regression form over the pre-flatten channels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .models import BasicBlock
from .tdf import write_tdf


def _int(x):
    if isinstance(x, (tuple, list)):
        if x[0] != x[1]:
            raise ValueError(f"non-square extent {x} not supported")
        return int(x[0])
    return int(x)


@dataclass
class ExportPlan:
    records: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)   # (layer_id, slot) -> ndarray
    modules: dict = field(default_factory=dict)   # layer_id -> (module, pre_flatten or None)
    layer_map: dict = field(default_factory=dict)  # module path -> layer_id


def _conv_record(layer_id: str, mod: nn.Conv2d) -> dict:
    k = _int(mod.kernel_size)
    return {
        "id": layer_id,
        "type": "conv",
        "in_channels": int(mod.in_channels),
        "out_channels": int(mod.out_channels),
        "kernel": k,
        "stride": _int(mod.stride),
        "padding": _int(mod.padding),
        "bias": mod.bias is not None,
    }


def _conv_weights(mod: nn.Conv2d):
    # torch stores (M, D, k, k); the wire format wants (D, M, k, k)
    out = {"weight": mod.weight.detach().numpy().transpose(1, 0, 2, 3).copy()}
    if mod.bias is not None:
        out["bias"] = mod.bias.detach().numpy().copy()
    return out


def _bn_record(layer_id: str, mod: nn.BatchNorm2d) -> dict:
    return {"id": layer_id, "type": "batchnorm", "channels": int(mod.num_features),
            "eps": float(mod.eps)}


def _bn_weights(mod: nn.BatchNorm2d):
    return {
        "scale": mod.weight.detach().numpy().copy(),
        "shift": mod.bias.detach().numpy().copy(),
        "running_mean": mod.running_mean.detach().numpy().copy(),
        "running_var": mod.running_var.detach().numpy().copy(),
    }


def _walk(model: nn.Sequential) -> ExportPlan:
    plan = ExportPlan()
    prev_flatten: nn.Module | None = None

    def add(layer_id, record, weights, module=None, pre_flatten=None, path=None):
        plan.records.append(record)
        for slot, arr in weights.items():
            plan.weights[(layer_id, slot)] = arr
        if module is not None:
            plan.modules[layer_id] = (module, pre_flatten)
            plan.layer_map[path or layer_id] = layer_id

    for name, mod in model.named_children():
        if isinstance(mod, nn.Conv2d):
            add(name, _conv_record(name, mod), _conv_weights(mod), mod, path=name)
            prev_flatten = None
        elif isinstance(mod, nn.Linear):
            rec = {"id": name, "type": "linear", "in_features": int(mod.in_features),
                   "out_features": int(mod.out_features), "bias": mod.bias is not None}
            weights = {"weight": mod.weight.detach().numpy().copy()}
            if mod.bias is not None:
                weights["bias"] = mod.bias.detach().numpy().copy()
            add(name, rec, weights, mod, pre_flatten=prev_flatten, path=name)
            prev_flatten = None
        elif isinstance(mod, nn.MaxPool2d):
            add(name, {"id": name, "type": "maxpool", "kernel": _int(mod.kernel_size),
                       "stride": _int(mod.stride)}, {})
            prev_flatten = None
        elif isinstance(mod, nn.AvgPool2d):
            add(name, {"id": name, "type": "avgpool", "kernel": _int(mod.kernel_size),
                       "stride": _int(mod.stride)}, {})
            prev_flatten = None
        elif isinstance(mod, nn.ReLU):
            add(name, {"id": name, "type": "relu"}, {})
            prev_flatten = None
        elif isinstance(mod, nn.Flatten):
            add(name, {"id": name, "type": "flatten"}, {})
            prev_flatten = mod
        elif isinstance(mod, nn.BatchNorm2d):
            add(name, _bn_record(name, mod), _bn_weights(mod))
            prev_flatten = None
        elif isinstance(mod, BasicBlock):
            tag = name
            plan.records.append({"id": f"{name}.save", "type": "residual_begin", "tag": tag})
            for part in ("conv_a", "bn_a", "relu_a", "conv_b", "bn_b"):
                sub = getattr(mod, part)
                sub_id = f"{name}.{part}"
                if isinstance(sub, nn.Conv2d):
                    add(sub_id, _conv_record(sub_id, sub), _conv_weights(sub), sub,
                        path=f"{name}.{part}")
                elif isinstance(sub, nn.BatchNorm2d):
                    add(sub_id, _bn_record(sub_id, sub), _bn_weights(sub))
                else:
                    add(sub_id, {"id": sub_id, "type": "relu"}, {})
            rec = {"id": f"{name}.add", "type": "residual_add", "tag": tag}
            weights = {}
            if mod.shortcut_conv is not None:
                sc_id = f"{name}.shortcut_conv"
                rec["shortcut_conv"] = _conv_record(sc_id, mod.shortcut_conv)
                for slot, arr in _conv_weights(mod.shortcut_conv).items():
                    weights[f"shortcut_conv.{slot}"] = arr
                rec["shortcut_bn"] = _bn_record(f"{name}.shortcut_bn", mod.shortcut_bn)
                for slot, arr in _bn_weights(mod.shortcut_bn).items():
                    weights[f"shortcut_bn.{slot}"] = arr
                plan.modules[sc_id] = (mod.shortcut_conv, None)
                plan.layer_map[f"{name}.shortcut_conv"] = sc_id
            add(f"{name}.add", rec, weights)
            plan.records.append({"id": f"{name}.relu_out", "type": "relu"})
            prev_flatten = None
        else:
            raise ValueError(
                f"unsupported layer type at {name!r}: {type(mod).__name__}"
            )
    return plan


def export_model(model: nn.Sequential, images, out_dir, *, name: str = "model",
                 input_shape=None, samples: int = 500, layer_ids=(), seed: int = 0,
                 dataset_id: str = "unspecified") -> dict:
    """Write net.json + weight TDFs + one dump directory per requested layer.

    `images` is an (N, C, H, W) array or tensor; `samples` of them are
    drawn with a seeded permutation (all, in order, if N <= samples).
    Returns the manifest dict (also written as manifest.json).
    """
    model = model.cpu().eval()
    plan = _walk(model)
    os.makedirs(out_dir, exist_ok=True)

    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
    if images.shape[0] > samples:
        picked = np.sort(np.random.default_rng(seed).permutation(images.shape[0])[:samples])
        images = images[picked]
    shape = tuple(input_shape) if input_shape is not None else images.shape[1:]

    doc = {"name": name, "input_shape": [int(x) for x in shape], "bn_eps": 1e-5,
           "layers": []}
    for rec in plan.records:
        rec = dict(rec)
        slots = {slot: f"{lid}.{slot}.tdf" for (lid, slot) in plan.weights if lid == rec["id"]}
        for (lid, slot), arr in plan.weights.items():
            if lid == rec["id"]:
                write_tdf(os.path.join(out_dir, f"{lid}.{slot}.tdf"),
                          np.asarray(arr, dtype=np.float32))
        if slots:
            rec["weights"] = dict(sorted(slots.items()))
        doc["layers"].append(rec)
    with open(os.path.join(out_dir, "net.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    unknown = [lid for lid in layer_ids if lid not in plan.modules]
    if unknown:
        raise ValueError(f"cannot dump unknown or weightless layers: {unknown}")

    captures: dict[str, dict] = {lid: {} for lid in layer_ids}
    handles = []
    for lid in layer_ids:
        mod, pre_flatten = plan.modules[lid]

        def pre_hook(module, args, store=captures[lid]):
            store["x"] = args[0].detach()

        def post_hook(module, args, output, store=captures[lid]):
            store["y"] = output.detach()

        if pre_flatten is not None:
            def flat_pre_hook(module, args, store=captures[lid]):
                store["x_spatial"] = args[0].detach()

            handles.append(pre_flatten.register_forward_pre_hook(flat_pre_hook))
        handles.append(mod.register_forward_pre_hook(pre_hook))
        handles.append(mod.register_forward_hook(post_hook))

    with torch.no_grad():
        model(torch.from_numpy(images))
    for h in handles:
        h.remove()

    dumps = []
    for lid in layer_ids:
        store = captures[lid]
        mod, _ = plan.modules[lid]
        x = store.get("x_spatial")
        if x is not None and (x.shape[2] != x.shape[3] or x.shape[2] % 2 == 0):
            x = None
        if x is None:
            x = store["x"]
        y = store["y"]
        if isinstance(mod, nn.Linear):
            if x.ndim == 2:
                x = x[:, :, None, None]
            y = y[:, :, None, None]
            geometry = {"kernel": int(x.shape[2]), "stride": 1, "padding": 0,
                        "in_channels": int(x.shape[1]), "out_channels": int(mod.out_features)}
        else:
            geometry = {"kernel": _int(mod.kernel_size), "stride": _int(mod.stride),
                        "padding": _int(mod.padding), "in_channels": int(mod.in_channels),
                        "out_channels": int(mod.out_channels)}
        dump_dir = os.path.join(out_dir, "dumps", lid)
        os.makedirs(dump_dir, exist_ok=True)
        with open(os.path.join(dump_dir, "meta.json"), "w") as fh:
            json.dump({"layer_id": lid, "geometry": geometry}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_tdf(os.path.join(dump_dir, "X.tdf"), x.numpy().astype(np.float32))
        write_tdf(os.path.join(dump_dir, "Y.tdf"), y.numpy().astype(np.float32))
        dumps.append(lid)

    manifest = {
        "model": name,
        "layer_map": dict(sorted(plan.layer_map.items())),
        "dumped_layers": dumps,
        "samples": int(images.shape[0]),
        "seed": int(seed),
        "dataset": dataset_id,
        "preprocessing": "float32, as provided",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def main(argv=None) -> int:
    import argparse

    from .models import build_lenet, build_resnet18, build_vgg16

    parser = argparse.ArgumentParser(description="export a model + dumps for sparsification")
    parser.add_argument("model", choices=["lenet", "vgg16", "resnet18"])
    parser.add_argument("--state-dict", default=None, help="trained weights (.pt)")
    parser.add_argument("--images", required=True,
                        help=".npy file of images (N, C, H, W), already preprocessed")
    parser.add_argument("--layers", nargs="+", default=[], help="layer ids to dump")
    parser.add_argument("--samples", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    build = {"lenet": build_lenet, "vgg16": build_vgg16, "resnet18": build_resnet18}
    model = build[args.model]()
    if args.state_dict:
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    images = np.load(args.images)
    export_model(model, images, args.out, name=args.model, samples=args.samples,
                 layer_ids=args.layers, seed=args.seed, dataset_id=args.images)
    print(f"exported {args.model} to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
