"""Command-line entry point: ``xmoco <command> [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import ablation, gradcheck
from .data import make_blobs, write_delimited
from .eval import DEFAULT_K, evaluate
from .matrix import MatrixError, load_xmc1, save_xmc1
from .pseudolabel import DEFAULT_ITERS, DEFAULT_LAMBDA, sinkhorn_labels
from .training import (
    FIELD_TYPES,
    ConfigError,
    DivergenceError,
    TrainConfig,
    config_from_pairs,
    dump_config,
    load_checkpoint,
    load_config,
    load_dataset,
    run,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("xmoco")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (default: none)")
    defaults = TrainConfig()
    for name, typ in FIELD_TYPES.items():
        default = getattr(defaults, name)
        if name == "base_lr":
            shown = f"{default} (0.0675 * batch_size / 256 when negative)"
        else:
            shown = repr(default)
        flags = [_flag(name)]
        if name == "lam":
            flags.append("--lambda")
        metavar = {bool: "BOOL", int: "INT", float: "FLOAT", str: "STR"}[typ]
        p.add_argument(*flags, dest=f"cfg_{name}", metavar=metavar, default=None,
                       help=f"(default: {shown})")


def _resolve_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {name: getattr(args, f"cfg_{name}") for name in FIELD_TYPES if getattr(args, f"cfg_{name}", None) is not None}
    cfg = config_from_pairs(overrides, cfg, where="command line: ")
    return cfg.validate()


def _write_text(path: str, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = make_blobs(args.classes, args.per_class, args.d_in, args.separation, args.seed)
    header = (f"blobs classes={args.classes} per_class={args.per_class} d_in={args.d_in} "
              f"separation={args.separation!r} seed={args.seed}")
    d = os.path.dirname(args.out)
    if d:
        os.makedirs(d, exist_ok=True)
    write_delimited(args.out, ds, with_labels=True, header=header)
    print(f"wrote {ds.size} samples x {ds.dim} features to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.txt"), dump_config(cfg))
    res = run(cfg, out_dir=args.out, resume=args.resume)
    steps = sum(1 for m in res.metrics if m["type"] == "step")
    print(f"trained {steps} steps; checkpoint {res.checkpoint}")
    return EXIT_OK


def _eval_common(args, linear: bool) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    if args.data:
        cfg = cfg.replace(data_path=args.data, has_labels=True)
    ds = load_dataset(cfg)
    k = args.k if not linear else DEFAULT_K
    rep = evaluate(state.pair.f, ds.samples, ds.labels, k=k, test_fraction=args.test_fraction,
                   split_seed=args.split_seed, penultimate=args.penultimate, knn=not linear, linear=linear,
                   probe_steps=getattr(args, "steps", 500), probe_lr=getattr(args, "lr", 0.5))
    out = dataclasses.asdict(rep)
    out["penultimate"] = bool(args.penultimate)
    out["checkpoint"] = args.checkpoint
    out["config"] = cfg.to_dict()
    text = json.dumps(out, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_eval_knn(args) -> int:
    return _eval_common(args, linear=False)


def cmd_eval_linear(args) -> int:
    return _eval_common(args, linear=True)


def cmd_sinkhorn(args) -> int:
    p = load_xmc1(args.input)
    labels = sinkhorn_labels(p, args.xi, args.lam, args.iters)
    save_xmc1(args.out, labels.y)
    dev = float(np.max(np.abs(labels.y.sum(axis=0) - 1.0)))
    print(f"wrote {labels.y.shape[0]}x{labels.y.shape[1]} labels to {args.out}; max column-sum deviation {dev:.3g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    k_values = [args.k] if args.k else None
    results = gradcheck.run_all(seed=args.seed, instances=args.instances, k_values=k_values)
    worst = max(r.worst for r in results)
    for r in results:
        print(f"{r.name}: {len(r.errors)} instances, worst relative error {r.worst:.3e} "
              f"[{'PASS' if r.passed else 'FAIL'}]")
    ok = all(r.passed for r in results)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    values = [v for v in (args.values or "").split(",") if v.strip()]
    if args.axis != "loss-switches" and not values:
        raise ConfigError(f"--values is required for axis {args.axis}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = ablation.sweep(args.axis, values, cfg, seeds=seeds, test_fraction=args.test_fraction)
    text = ablation.table_csv(args.axis, rows, cfg, seeds)
    _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="xmoco", description="Contrastive training with soft uniform-negative pseudo-labels.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", help="write a synthetic blob dataset as CSV", formatter_class=fmt)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=400)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the encoder")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory (metrics.jsonl, checkpoint.xmck)")
    p.add_argument("--resume", help="checkpoint to resume from (default: none)")
    p.set_defaults(func=cmd_train)

    for name, func, linear in (("eval-knn", cmd_eval_knn, False), ("eval-linear", cmd_eval_linear, True)):
        p = sub.add_parser(name, help=f"{'linear probe' if linear else 'k-NN'} accuracy of a frozen encoder",
                           formatter_class=fmt)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", default=None, help="labelled CSV to evaluate instead of the training data")
        p.add_argument("--test-fraction", type=float, default=0.25)
        p.add_argument("--split-seed", type=int, default=0)
        p.add_argument("--penultimate", action="store_true", help="use hidden features instead of the output")
        p.add_argument("--out", default=None, help="JSON report path")
        if linear:
            p.add_argument("--steps", type=int, default=500)
            p.add_argument("--lr", type=float, default=0.5)
        else:
            p.add_argument("--k", type=int, default=DEFAULT_K)
        p.set_defaults(func=func)

    p = sub.add_parser("sinkhorn", help="pseudo-labels for an XMC1 probability matrix", formatter_class=fmt)
    p.add_argument("--in", dest="input", required=True, help="XMC1 (K+1) x N probability matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--xi", type=float, default=0.9)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--iters", type=int, default=DEFAULT_ITERS)
    p.set_defaults(func=cmd_sinkhorn)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--k", type=int, default=0, help="fix the number of negatives (0: random in 1..6)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="shared-seed sweep writing a CSV table")
    p.add_argument("--axis", required=True, choices=ablation.AXES)
    p.add_argument("--values", default="", help="comma-separated values (loss-switches: optional subset of "
                   + ",".join(n for n, _, _ in ablation.SWITCH_GRID) + ")")
    p.add_argument("--seeds", default="", help="comma-separated seeds; median accuracy reported (default: --seed)")
    p.add_argument("--test-fraction", type=float, default=0.25, help="(default: 0.25)")
    p.add_argument("--out", required=True, help="CSV table path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MatrixError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
