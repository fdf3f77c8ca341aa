"""``lrbp`` command-line interface.

Every command writes CSV (with a header row) or JSON, exits 0 on success and
otherwise prints a single JSON line ``{"error": KIND, "message": ...}`` to
stderr with one of these exit codes:

    2  usage error (unknown flag, bad value)
    3  missing input file
    4  format or schema mismatch (wrong record type, corrupt file, bad CSV)
    5  invalid data or inconsistent dimensions
    1  anything else
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .classifier import FullModel, LowRankModel, spectrum, truncate_model
from .codecomp import CoDecomposedModel, codecompose
from .dataio import load_dataset, load_model, save_dataset, save_model, synth_covariance_dataset
from .errors import DataError, DimensionError, FormatError, ParseError
from .training import (
    NORMALIZATIONS,
    TrainConfig,
    default_normalization,
    evaluate_dataset,
    sweep,
    train,
)

log = logging.getLogger("lrbp")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DATA = 5

_KIND_FLAG = {"full": "full", "lowrank": "lowrank", "codecomp": "codecomposed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sidecar(path):
    return Path(str(path) + ".json")


def _write_model(model, path, normalization, extra=None):
    save_model(model, path)
    meta = {"kind": model.kind, "normalization": normalization}
    meta.update(extra or {})
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def _model_normalization(path, model, requested):
    if requested != "auto":
        return requested
    side = _sidecar(path)
    if side.exists():
        norm = json.loads(side.read_text()).get("normalization")
        if norm in NORMALIZATIONS:
            return norm
    return default_normalization(model.kind)


def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def parse_range(text):
    """``name=a..b[:ratio]`` or ``name=v1,v2,...`` -> ``(name, [values])``.

    Ranges are geometric. The default ratio is 2, except that ``hw`` ranges
    whose ends are both perfect squares step by 4 (square maps with doubling
    side length).
    """
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"grid entry must look like name=a..b, got {text!r}")
    name, body = text.split("=", 1)
    name = name.strip()
    if name not in ("c", "hw"):
        raise argparse.ArgumentTypeError(f"grid variable must be c or hw, got {name!r}")
    try:
        if ".." in body:
            ratio = None
            if ":" in body:
                body, ratio_text = body.split(":", 1)
                ratio = int(ratio_text)
            lo, hi = (int(v) for v in body.split(".."))
            if ratio is None:
                squares = math.isqrt(lo) ** 2 == lo and math.isqrt(hi) ** 2 == hi
                ratio = 4 if name == "hw" and squares else 2
            if lo < 1 or hi < lo or ratio < 2:
                raise ValueError
            values = []
            v = lo
            while v <= hi:
                values.append(v)
                v *= ratio
        else:
            values = [int(v) for v in body.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid range {text!r}") from None
    return name, values


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    ds = synth_covariance_dataset(
        args.classes,
        args.per_class,
        args.h,
        args.w,
        args.c,
        seed=args.seed,
        alpha=args.alpha,
        test_fraction=args.test_fraction,
        relu=args.relu,
        subspace_dim=args.subspace_dim,
    )
    save_dataset(ds, args.out)
    _write_json(
        None,
        {
            "out": args.out,
            "N": ds.N,
            "K": ds.K,
            "train": int((~ds.is_test).sum()),
            "test": int(ds.is_test.sum()),
            "shape": [ds.h, ds.w, ds.c],
        },
    )


def cmd_train(args):
    ds = load_dataset(_require(args.data))
    cfg = TrainConfig(
        model_kind=_KIND_FLAG[args.model],
        rank=args.rank,
        m=args.m,
        learning_rate=args.lr,
        anneal_factor=args.anneal,
        anneal_every=args.anneal_every,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        batch_size=args.batch,
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        seed=args.seed,
        normalization=None if args.normalization == "auto" else args.normalization,
    )
    model, report = train(ds, cfg)
    _write_model(model, args.out, cfg.normalization)
    if args.report:
        rows = report.rows()
        columns = list(rows[0]) if rows else ["epoch"]
        benchmod.write_rows_csv(args.report, rows, columns)
    last = report.epochs[-1] if report.epochs else None
    _write_json(
        None,
        {
            "model": args.out,
            "kind": model.kind,
            "normalization": cfg.normalization,
            "n_params": report.n_params,
            "epochs": len(report.epochs),
            "objective": _finite(last.objective) if last else None,
            "train_accuracy": _finite(last.train_accuracy) if last else None,
            "accuracy": _finite(last.test_accuracy) if last else None,
            "per_class": report.per_class_accuracy,
        },
    )


def cmd_eval(args):
    ds = load_dataset(_require(args.data))
    model = load_model(_require(args.model))
    _check_channels(model, ds)
    norm = _model_normalization(args.model, model, args.normalization)
    result = evaluate_dataset(model, ds, split=args.split, normalization=norm)
    payload = result.to_json()
    payload.update(split=args.split, normalization=norm)
    _write_json(args.out, payload)


def _check_channels(model, ds):
    if model.c != ds.c:
        raise DimensionError(f"model expects {model.c} channels, dataset has {ds.c}")
    if model.K != ds.K:
        raise DimensionError(f"model has {model.K} classes, dataset has {ds.K}")


def cmd_truncate(args):
    model = load_model(_require(args.model), kind="full")
    low = truncate_model(model, args.rank)
    norm = _model_normalization(args.model, model, "auto")
    _write_model(low, args.out, norm, {"source": str(args.model), "rank": args.rank})
    _write_json(None, {"out": args.out, "rank": args.rank, "stored_rank": low.rank})


def cmd_codecompose(args):
    model = load_model(_require(args.model))
    if not isinstance(model, LowRankModel):
        raise FormatError(f"{args.model}: codecompose needs a lowrank model, got {model.kind}")
    cd = codecompose(model, args.m)
    norm = _model_normalization(args.model, model, "auto")
    _write_model(cd, args.out, norm, {"source": str(args.model), "m": args.m})
    _write_json(None, {"out": args.out, "m": args.m, "n_params": cd.n_params})


def cmd_spectrum(args):
    model = load_model(_require(args.model), kind="full")
    eig = spectrum(model)
    benchmod.write_rows_csv(args.out, eig.rows(), ["rank_index", "mean_eig", "std_eig"])
    _write_json(None, {"out": args.out, "small_fraction": eig.small_fraction()})


def cmd_sweep(args):
    ds = load_dataset(_require(args.data))
    cfg = TrainConfig(
        model_kind="full",
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        batch_size=args.batch,
        epochs=args.epochs,
        anneal_factor=args.anneal,
        anneal_every=args.anneal_every,
        seed=args.seed,
        normalization=None if args.normalization == "auto" else args.normalization,
    )
    full = None
    if args.full_model:
        full = load_model(_require(args.full_model), kind="full")
        _check_channels(full, ds)
        if args.normalization == "auto":
            cfg.normalization = _model_normalization(args.full_model, full, "auto")
    rows = sweep(ds, args.ms, args.ranks, cfg, full_model=full)
    benchmod.write_rows_csv(
        args.out, [r.csv_row() for r in rows], ["m", "r", "accuracy", "psnr_db", "param_bytes"]
    )
    failed = [{"m": r.m, "r": r.r} for r in rows if r.status != "ok"]
    _write_json(None, {"out": args.out, "cells": len(rows), "failed": failed})


def cmd_bench(args):
    if args.methods == "all":
        methods = list(benchmod.METHODS)
    else:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    grid = dict(args.grid)
    cs = grid.get("c", [512])
    hws = grid.get("hw", [784])
    shapes, c0, hw0 = benchmod.star_grid(cs, hws, args.center_c, args.center_hw)
    report = benchmod.time_benchmark(
        methods,
        shapes,
        reps=args.reps,
        seed=args.seed,
        K=args.K,
        m=args.m,
        r=args.r,
        d=args.d,
        parallel=args.parallel,
        c0=c0,
        hw0=hw0,
    )
    benchmod.write_rows_csv(args.out, report.rows, benchmod.BENCH_COLUMNS)
    analytic = [
        {"method": method, "d": d, **cm.as_dict()}
        for method, d, cm in benchmod.table1(K=args.K, m=args.m, r=args.r)
    ]
    summary = report.summary()
    summary["exponents"] = {k: _finite(v) for k, v in summary["exponents"].items()}
    summary.update(out=args.out, rows=len(report.rows), analytic=analytic)
    _write_json(None, summary)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--anneal", type=float, default=0.25)
    p.add_argument("--anneal-every", type=int, default=10)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalization", choices=("auto",) + NORMALIZATIONS, default="auto")


def build_parser():
    parser = _Parser(
        prog="lrbp",
        description="Low-rank bilinear pooling classifiers.",
        epilog="exit codes: 0 ok, 1 unexpected error, 2 usage, 3 missing file, "
        "4 format/schema mismatch, 5 invalid data or dimensions",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a covariance-only synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=1000, help="maps per class (train + test)")
    p.add_argument("--h", type=int, default=6)
    p.add_argument("--w", type=int, default=6)
    p.add_argument("--c", type=int, default=16)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--subspace-dim", type=int, default=None)
    p.add_argument("--relu", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one-vs-rest classifiers")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=tuple(_KIND_FLAG), default="lowrank")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--warmup-epochs", type=int, default=5)
    _train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, per-class accuracy and confusion counts")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--normalization", choices=("auto",) + NORMALIZATIONS, default="auto")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("truncate", help="rank-r eigen-truncation of a full model")
    p.add_argument("--model", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_truncate)

    p = sub.add_parser("codecompose", help="shared projection + compact classifiers")
    p.add_argument("--model", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_codecompose)

    p = sub.add_parser("spectrum", help="rank-indexed eigenvalue mean/std of a full model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("sweep", help="accuracy/PSNR/size over (m, r)")
    p.add_argument("--data", required=True)
    p.add_argument("--ranks", type=_int_list, default=[2, 4, 8, 16])
    p.add_argument("--ms", type=_int_list, default=[16, 32, 64, 100])
    p.add_argument("--full-model", default=None, help="reuse a trained full model")
    _train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="timing and analytic cost of pooling variants")
    p.add_argument("--methods", default="all")
    p.add_argument("--grid", nargs="+", type=parse_range, default=[("c", [64, 128, 256, 512, 1024]), ("hw", [49, 196, 784, 3136])])
    p.add_argument("--center-c", type=int, default=None)
    p.add_argument("--center-hw", type=int, default=None)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--K", type=int, default=200)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--d", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", action="store_true", help="allow multi-threaded BLAS")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc, EXIT_MISSING)
    except (FormatError, ParseError) as exc:
        return _fail("format", exc, EXIT_FORMAT)
    except (DataError, DimensionError, ValueError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_OTHER)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
