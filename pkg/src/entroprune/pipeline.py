"""Layer-by-layer sparsification of a whole network from activation dumps.

Every targeted layer is solved independently against baseline dumps. The
surviving input channels of a layer are removed by deleting the matching
output filters of the layer that produced them (plus the affected
batchnorm channels), and the layer itself receives the regression refit
weights; `mask_only` keeps the original weights restricted to the kept
channels instead, which is functionally identical to zeroing them.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import SparsifyConfig
from .dumps import ConvGeometry, LayerDump
from .errors import DataError, PruneError, StructuralError, ValidationError
from .lift import devectorize_kernels, extract_patches
from .measures import check_distribution, sparsity
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
    flops,
    param_count,
    validate_network,
)
from .solver import SolveResult, lambda_step, mse_term, solve

log = logging.getLogger(__name__)


@dataclass
class LayerPruneResult:
    """One layer's sparsification outcome, ready for network surgery."""

    layer_id: str
    solve: SolveResult
    kept_in: list
    new_geometry: ConvGeometry
    refit_kernels: np.ndarray  # (|kept|, M, k, k)
    refit_bias: np.ndarray     # (M,)


@dataclass
class PruneReport:
    rows: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "totals": self.totals}

    def to_text(self) -> str:
        header = f"{'layer':<16}{'params before':>14}{'params after':>14}{'local sparsity':>16}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row['layer_id']:<16}{row['params_before']:>14}{row['params_after']:>14}"
                f"{100.0 * row['local_sparsity']:>15.2f}%"
            )
        t = self.totals
        lines.append("-" * len(header))
        lines.append(
            f"{'total':<16}{t['params_before']:>14}{t['params_after']:>14}"
            f"{100.0 * t['sparsity']:>15.2f}%"
        )
        lines.append(
            f"FLOPs per image: {t['flops_before']} -> {t['flops_after']}"
        )
        if t.get("notes"):
            for note in t["notes"]:
                lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def sample_positions(dump: LayerDump, cfg: SparsifyConfig) -> np.ndarray:
    """Output positions to regress on: everything when it fits the budget,
    otherwise a seeded uniform sample without replacement, index-sorted."""
    oh, ow = dump.out_shape
    total = dump.num_samples * oh * ow
    if total <= cfg.max_points:
        grid = np.indices((dump.num_samples, oh, ow)).reshape(3, -1).T
        return np.ascontiguousarray(grid, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    flat = np.sort(rng.choice(total, size=cfg.max_points, replace=False))
    t, rem = np.divmod(flat, oh * ow)
    r, c = np.divmod(rem, ow)
    return np.stack([t, r, c], axis=1).astype(np.int64)


def _result_from_solve(layer_id: str, geometry: ConvGeometry, res: SolveResult) -> LayerPruneResult:
    k2 = geometry.kernel**2
    cols = np.concatenate([np.arange(d * k2, (d + 1) * k2) for d in res.support])
    refit = devectorize_kernels(res.qhat[:, cols], geometry)
    new_geometry = ConvGeometry(
        kernel=geometry.kernel,
        stride=geometry.stride,
        padding=geometry.padding,
        in_channels=len(res.support),
        out_channels=geometry.out_channels,
    )
    return LayerPruneResult(
        layer_id=layer_id,
        solve=res,
        kept_in=list(res.support),
        new_geometry=new_geometry,
        refit_kernels=refit,
        refit_bias=res.coeffs[:, 0].copy(),
    )


def sparsify_layer(dump: LayerDump, cfg: SparsifyConfig) -> LayerPruneResult:
    """Sample positions, lift, solve, and package the refit for one layer."""
    positions = sample_positions(dump, cfg)
    data = extract_patches(dump, positions)
    width = data.features.shape[0] + 1
    if data.num_points < 2 * width:
        log.warning(
            "layer %s: only %d regression points for %d coefficients; the refit "
            "will overfit badly, capture more samples",
            dump.layer_id, data.num_points, width,
        )
    try:
        res = solve(data, cfg)
    except PruneError as exc:
        exc.args = (f"layer {dump.layer_id}: {exc.args[0] if exc.args else exc}",)
        raise
    return _result_from_solve(dump.layer_id, dump.geometry, res)


def merge_residual_w(w_a, w_b) -> np.ndarray:
    """Join the channel weights of two layers sharing an input: elementwise
    maximum, renormalized. Callers re-run lambda_step for both layers."""
    w_a = check_distribution(w_a)
    w_b = check_distribution(w_b)
    if w_a.shape != w_b.shape:
        raise ValidationError(f"cannot merge weights of lengths {w_a.size} and {w_b.size}")
    merged = np.maximum(w_a, w_b)
    return merged / merged.sum()


def _refit_with_w(data, w, cfg: SparsifyConfig) -> SolveResult:
    """Fresh ridge fit for an externally supplied w (residual merging)."""
    from .solver import evaluate_loss
    from .lift import expand_channel_weights

    coeffs = lambda_step(w, data, cfg.eps_l2)
    support = sorted(int(d) for d in np.nonzero(w >= cfg.prune_threshold)[0])
    if not support:
        support = [int(np.argmax(w))]
    qhat = coeffs[:, 1:] * expand_channel_weights(w, data.geometry.kernel**2)
    mask = np.zeros(data.geometry.in_channels, dtype=bool)
    mask[support] = True
    qhat[:, np.repeat(~mask, data.geometry.kernel**2)] = 0.0
    return SolveResult(
        w=w,
        coeffs=coeffs,
        loss_trace=[evaluate_loss(w, coeffs, data, cfg)],
        support=support,
        qhat=qhat,
        final_mse=mse_term(w, coeffs, data),
        config=cfg,
    )


# ---------------------------------------------------------------------------
# Network surgery


def _find_layer(net: NetworkSpec, layer_id: str):
    """Locate a top-level layer or a shortcut conv nested in a residual add."""
    for layer in net.layers:
        if layer.id == layer_id:
            return layer
        if isinstance(layer, ResidualAdd) and layer.shortcut_conv is not None:
            if layer.shortcut_conv.id == layer_id:
                return layer.shortcut_conv
    raise StructuralError(f"{net.name}: no layer with id {layer_id!r}")


def _trace_producer(net: NetworkSpec, layer_id: str):
    """Walk backwards from `layer_id` to the conv/linear layer producing its
    input channels.

    Returns (producer, batchnorms_between, crossed_flatten, residual_tags):
    residual_tags lists tags whose saved activation equals this layer's
    input, meaning a shortcut branch consumes the same channels.
    """
    idx = net.index_of(layer_id)
    bns = []
    crossed_flatten = False
    tags = []
    for j in range(idx - 1, -1, -1):
        layer = net.layers[j]
        if isinstance(layer, (ReluLayer, MaxPoolLayer, AvgPoolLayer)):
            continue
        if isinstance(layer, FlattenLayer):
            crossed_flatten = True
            continue
        if isinstance(layer, BatchNormLayer):
            bns.append(layer)
            continue
        if isinstance(layer, ResidualBegin):
            tags.append(layer.tag)
            continue
        if isinstance(layer, ResidualAdd):
            raise StructuralError(
                f"cannot prune input channels of {layer_id!r}: its input is the "
                f"sum produced by residual add {layer.id!r}"
            )
        if isinstance(layer, (ConvLayer, LinearLayer)):
            return layer, bns, crossed_flatten, tags
        raise StructuralError(f"unexpected layer {layer.id!r} while tracing {layer_id!r}")
    raise StructuralError(
        f"cannot prune input channels of {layer_id!r}: it consumes the network input"
    )


def _slice_consumer_inputs(layer, result: LayerPruneResult, mask_only: bool):
    """Install the refit (or mask-sliced original) weights into the pruned layer."""
    kept = list(result.kept_in)
    k2 = result.new_geometry.kernel ** 2
    if isinstance(layer, ConvLayer):
        if mask_only:
            if layer.weight is None:
                raise StructuralError(f"{layer.id}: mask-only pruning needs original weights")
            layer.weight = layer.weight[kept]
        else:
            layer.weight = result.refit_kernels.copy()
            layer.bias = result.refit_bias.copy()
            layer.has_bias = True
        layer.in_channels = len(kept)
    elif isinstance(layer, LinearLayer):
        channels = result.solve.w.size
        if layer.in_features % channels != 0 or layer.in_features // channels != k2:
            raise StructuralError(
                f"{layer.id}: {layer.in_features} input features are not {channels} "
                f"channels of {k2} values"
            )
        if mask_only:
            if layer.weight is None:
                raise StructuralError(f"{layer.id}: mask-only pruning needs original weights")
            blocks = layer.weight.reshape(layer.out_features, channels, k2)
            layer.weight = blocks[:, kept, :].reshape(layer.out_features, len(kept) * k2)
        else:
            m = result.new_geometry.out_channels
            layer.weight = result.refit_kernels.transpose(1, 0, 2, 3).reshape(
                m, len(kept) * k2
            )
            layer.bias = result.refit_bias.copy()
            layer.has_bias = True
        layer.in_features = len(kept) * k2
    else:
        raise StructuralError(f"{layer.id}: only conv/linear layers can be pruned")


def _slice_producer_outputs(layer, kept):
    if isinstance(layer, ConvLayer):
        if layer.weight is not None:
            layer.weight = layer.weight[:, kept]
        if layer.bias is not None:
            layer.bias = layer.bias[kept]
        layer.out_channels = len(kept)
    elif isinstance(layer, LinearLayer):
        if layer.weight is not None:
            layer.weight = layer.weight[kept]
        if layer.bias is not None:
            layer.bias = layer.bias[kept]
        layer.out_features = len(kept)
    else:
        raise StructuralError(f"{layer.id}: producer must be a conv or linear layer")


def _slice_batchnorm(layer: BatchNormLayer, kept):
    for name in ("scale", "shift", "running_mean", "running_var"):
        arr = getattr(layer, name)
        if arr is not None:
            setattr(layer, name, arr[kept])
    layer.channels = len(kept)


def prune_network(net: NetworkSpec, results, mask_only: bool = False) -> NetworkSpec:
    """Apply per-layer results to a copy of the network.

    Removing input channel d of a pruned layer deletes output filter d of
    the layer that produced it and the matching batchnorm channels. A layer
    whose input also feeds a residual shortcut can only be pruned together
    with that shortcut conv, with identical surviving channels.
    """
    pruned = copy.deepcopy(net)
    by_id = {}
    for res in results:
        if res.layer_id in by_id:
            raise StructuralError(f"duplicate prune result for layer {res.layer_id!r}")
        by_id[res.layer_id] = res

    producer_slices = {}  # producer id -> (layer, kept, requested by)
    bn_slices = {}
    consumed = set()

    def request_producer(producer, kept, requester):
        prev = producer_slices.get(producer.id)
        if prev is not None and prev[1] != list(kept):
            raise StructuralError(
                f"layers {prev[2]!r} and {requester!r} prune producer "
                f"{producer.id!r} inconsistently"
            )
        producer_slices[producer.id] = (producer, list(kept), requester)

    for res in results:
        if res.layer_id in consumed:
            continue
        layer = _find_layer(pruned, res.layer_id)
        is_shortcut = all(layer is not l for l in pruned.layers)
        if is_shortcut:
            # handled together with the main-path layer crossing its tag
            continue
        producer, bns, _, tags = _trace_producer(pruned, res.layer_id)

        partner_results = []
        for tag in tags:
            add = next(
                (
                    l
                    for l in pruned.layers
                    if isinstance(l, ResidualAdd) and l.tag == tag
                ),
                None,
            )
            if add is None:
                raise StructuralError(f"residual tag {tag!r} has no matching add")
            if add.shortcut_conv is None:
                raise StructuralError(
                    f"cannot prune {res.layer_id!r}: its input feeds the identity "
                    f"shortcut of {add.id!r}"
                )
            partner = by_id.get(add.shortcut_conv.id)
            if partner is None:
                raise StructuralError(
                    f"pruning {res.layer_id!r} requires a matching result for "
                    f"shortcut conv {add.shortcut_conv.id!r}"
                )
            if list(partner.kept_in) != list(res.kept_in):
                raise StructuralError(
                    f"layers {res.layer_id!r} and {add.shortcut_conv.id!r} disagree "
                    f"on surviving channels"
                )
            partner_results.append((add.shortcut_conv, partner))

        out_dim = producer.out_channels if isinstance(producer, ConvLayer) else producer.out_features
        if res.solve.w.size != out_dim:
            raise StructuralError(
                f"layer {res.layer_id!r} was solved over {res.solve.w.size} channels "
                f"but producer {producer.id!r} emits {out_dim}"
            )

        _slice_consumer_inputs(layer, res, mask_only)
        for shortcut_layer, partner in partner_results:
            _slice_consumer_inputs(shortcut_layer, partner, mask_only)
            consumed.add(partner.layer_id)
        request_producer(producer, res.kept_in, res.layer_id)
        for bn in bns:
            bn_slices[bn.id] = (bn, list(res.kept_in))
        consumed.add(res.layer_id)

    for res in results:
        if res.layer_id not in consumed:
            raise StructuralError(
                f"result for shortcut conv {res.layer_id!r} has no matching "
                f"main-path result"
            )

    for producer, kept, _ in producer_slices.values():
        _slice_producer_outputs(producer, kept)
    for bn, kept in bn_slices.values():
        _slice_batchnorm(bn, kept)

    validate_network(pruned)
    return pruned


def report(baseline: NetworkSpec, pruned: NetworkSpec, input_shape=None,
           notes=()) -> PruneReport:
    """Per-layer and global parameter/sparsity/FLOPs accounting."""
    if len(baseline.layers) != len(pruned.layers):
        raise StructuralError("baseline and pruned networks have different layer counts")
    rows = []
    for before, after in zip(baseline.layers, pruned.layers):
        if before.id != after.id or type(before) is not type(after):
            raise StructuralError(
                f"layer mismatch: {before.id!r} ({before.type_name}) vs "
                f"{after.id!r} ({after.type_name})"
            )
        pb, pa = before.param_count(), after.param_count()
        if pb == 0 and pa == 0:
            continue
        rows.append(
            {
                "layer_id": before.id,
                "params_before": pb,
                "params_after": pa,
                "local_sparsity": sparsity(pb, pa) if pb else 0.0,
            }
        )
    shape = tuple(input_shape) if input_shape is not None else tuple(baseline.input_shape)
    totals = {
        "params_before": param_count(baseline),
        "params_after": param_count(pruned),
        "flops_before": flops(baseline, shape),
        "flops_after": flops(pruned, shape),
    }
    totals["sparsity"] = sparsity(totals["params_before"], totals["params_after"])
    if notes:
        totals["notes"] = list(notes)
    if totals["params_before"] != sum(r["params_before"] for r in rows) or totals[
        "params_after"
    ] != sum(r["params_after"] for r in rows):
        raise StructuralError("report totals disagree with per-layer rows")
    return PruneReport(rows=rows, totals=totals)


def save_report(rep: PruneReport, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.json"), "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "report.txt"), "w") as fh:
        fh.write(rep.to_text())


# ---------------------------------------------------------------------------
# Whole-network orchestration


def _classify(net: NetworkSpec, layer_id: str):
    """('ok'|'residual'|'skip', detail) for one dumped layer."""
    layer = _find_layer(net, layer_id)
    if all(layer is not l for l in net.layers):
        return "shortcut", None
    try:
        _, _, _, tags = _trace_producer(net, layer_id)
    except StructuralError as exc:
        return "skip", str(exc)
    if tags:
        return "residual", tags
    return "ok", None


def sparsify_net(net: NetworkSpec, dumps: dict, cfg: SparsifyConfig,
                 mask_only: bool = False, merge_residual: bool = False,
                 jobs: int = 1):
    """Sparsify every dumped, prunable layer and rebuild the network.

    Returns (pruned_net, report, results, notes). Layers whose input feeds
    a residual shortcut are skipped unless `merge_residual` is set and the
    shortcut conv was dumped too; then both are solved, their channel
    weights merged, and both refit with the merged weights.
    """
    notes = []
    solo = []
    pairs = []
    handled = set()
    for layer_id in sorted(dumps):
        if layer_id in handled:
            continue
        kind, detail = _classify(net, layer_id)
        if kind == "skip":
            notes.append(f"skipped {layer_id}: {detail}")
        elif kind == "shortcut":
            continue  # picked up by its main-path partner
        elif kind == "residual":
            adds = [
                l for l in net.layers
                if isinstance(l, ResidualAdd) and l.tag in detail
            ]
            shortcut_ids = [
                a.shortcut_conv.id for a in adds if a.shortcut_conv is not None
            ]
            if not merge_residual:
                notes.append(
                    f"skipped {layer_id}: input feeds a residual shortcut "
                    f"(rerun with merge_residual)"
                )
            elif len(shortcut_ids) != len(adds):
                notes.append(f"skipped {layer_id}: identity residual input")
            elif any(s not in dumps for s in shortcut_ids):
                notes.append(
                    f"skipped {layer_id}: no dump for shortcut {shortcut_ids}"
                )
            else:
                pairs.append((layer_id, shortcut_ids))
                handled.update(shortcut_ids)
        else:
            solo.append(layer_id)

    def run_solo(layer_id):
        return sparsify_layer(dumps[layer_id], cfg)

    results = []
    if jobs > 1 and len(solo) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results.extend(pool.map(run_solo, solo))
    else:
        results.extend(run_solo(lid) for lid in solo)

    for main_id, shortcut_ids in pairs:
        members = [main_id] + shortcut_ids
        datasets = {
            lid: extract_patches(dumps[lid], sample_positions(dumps[lid], cfg))
            for lid in members
        }
        solved = {lid: solve(datasets[lid], cfg) for lid in members}
        merged = solved[main_id].w
        for lid in shortcut_ids:
            merged = merge_residual_w(merged, solved[lid].w)
        for lid in members:
            refit = _refit_with_w(datasets[lid], merged, cfg)
            results.append(_result_from_solve(lid, dumps[lid].geometry, refit))
        notes.append(
            f"merged residual channel weights across {', '.join(members)}"
        )

    pruned = prune_network(net, results, mask_only=mask_only)
    rep = report(net, pruned, notes=notes)
    return pruned, rep, results, notes
