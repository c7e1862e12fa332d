"""Command-line interface.

Exit codes: 0 success, 2 data/validation error, 3 solver violation.
Every failure prints a single machine-parsable line `error: <kind>: <msg>`
to stderr; reports go to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .config import SparsifyConfig
from .dumps import load_dump
from .engine import evaluate
from .errors import DataError, PruneError, SolverViolationError
from .measures import sparsity
from .network import load_network, param_count, save_network, validate_network
from .pipeline import report, save_report, sparsify_layer, sparsify_net
from .solver import save_result


def _config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--eps-w", type=float, default=SparsifyConfig.eps_w,
                        help="entropy weight, must be negative (default %(default)s)")
    parser.add_argument("--eps-l2", type=float, default=SparsifyConfig.eps_l2,
                        help="ridge weight (default %(default)s)")
    parser.add_argument("--max-points", type=int, default=SparsifyConfig.max_points,
                        help="cap on lifted regression points (default %(default)s)")
    parser.add_argument("--seed", type=int, default=SparsifyConfig.seed,
                        help="sampling seed (default %(default)s)")
    parser.add_argument("--threshold", type=float, default=SparsifyConfig.prune_threshold,
                        help="channel weights below this are pruned (default %(default)s)")


def _config_from(args) -> SparsifyConfig:
    return SparsifyConfig(
        eps_w=args.eps_w,
        eps_l2=args.eps_l2,
        max_points=args.max_points,
        seed=args.seed,
        prune_threshold=args.threshold,
    )


def cmd_sparsify_layer(args) -> int:
    dump = load_dump(args.dump_dir)
    cfg = _config_from(args)
    result = sparsify_layer(dump, cfg)
    out = args.out or args.dump_dir
    save_result(result.solve, out, layer_id=dump.layer_id)
    kept = len(result.kept_in)
    print(f"layer={dump.layer_id} kept={kept}/{dump.geometry.in_channels} "
          f"support={result.kept_in}")
    return 0


def cmd_sparsify_net(args) -> int:
    net = load_network(args.net_json)
    validate_network(net)
    if not os.path.isdir(args.dumps_dir):
        raise DataError(f"not a dump directory: {args.dumps_dir}")
    dumps = {}
    for entry in sorted(os.listdir(args.dumps_dir)):
        path = os.path.join(args.dumps_dir, entry)
        if os.path.isdir(path) and os.path.isfile(os.path.join(path, "meta.json")):
            dump = load_dump(path)
            dumps[dump.layer_id] = dump
    if not dumps:
        raise DataError(f"no layer dumps found under {args.dumps_dir}")
    cfg = _config_from(args)
    pruned, rep, results, notes = sparsify_net(
        net, dumps, cfg,
        mask_only=args.mask_only,
        merge_residual=args.merge_residual,
        jobs=args.jobs,
    )
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    save_network(pruned, out, filename="pruned_net.json")
    save_report(rep, out)
    for res in results:
        save_result(res.solve, os.path.join(out, f"solve_{res.layer_id}"),
                    layer_id=res.layer_id)
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        print(rep.to_text(), end="")
    return 0


def cmd_eval(args) -> int:
    from .datasets import load_eval_dataset

    net = load_network(args.net_json)
    validate_network(net)
    data = load_eval_dataset(args.images, args.labels)
    acc = evaluate(net, data)
    if args.json:
        print(json.dumps({"accuracy": acc, "samples": len(data)}, sort_keys=True))
    else:
        print(f"accuracy={acc:.6f}")
    return 0


def cmd_report(args) -> int:
    baseline = load_network(args.baseline_net)
    pruned = load_network(args.pruned_net)
    validate_network(baseline)
    validate_network(pruned)
    rep = report(baseline, pruned)
    if args.out:
        save_report(rep, args.out)
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        print(rep.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entroprune",
        description="Entropy-guided channel pruning for convolutional networks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sparsify-layer", help="sparsify one dumped layer")
    p.add_argument("dump_dir", help="directory with meta.json + X.tdf + Y.tdf")
    p.add_argument("--out", default=None, help="output directory (default: dump dir)")
    _config_flags(p)
    p.set_defaults(fn=cmd_sparsify_layer)

    p = sub.add_parser("sparsify-net", help="sparsify every dumped layer of a network")
    p.add_argument("dumps_dir", help="directory of per-layer dump directories")
    p.add_argument("net_json", help="network description (net.json)")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--mask-only", action="store_true",
                   help="keep original weights on surviving channels instead of refits")
    p.add_argument("--merge-residual", action="store_true",
                   help="merge channel weights across residual input pairs")
    p.add_argument("--jobs", type=int, default=1, help="concurrent layer solves")
    p.add_argument("--json", action="store_true", help="machine-readable report on stdout")
    _config_flags(p)
    p.set_defaults(fn=cmd_sparsify_net)

    p = sub.add_parser("eval", help="top-1 accuracy of a network on a dataset")
    p.add_argument("net_json")
    p.add_argument("--images", required=True, help="IDX or TDF image file")
    p.add_argument("--labels", required=True, help="IDX or TDF label file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="compare two networks")
    p.add_argument("baseline_net")
    p.add_argument("pruned_net")
    p.add_argument("--out", default=None, help="also write report.json/report.txt here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SolverViolationError as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return 3
    except PruneError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
