"""Command-line runner: ``edgemsi run | sweep | bounds``."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

from . import bounds
from .config import ConfigError, parse_config, with_value
from .experiment import CSV_COLUMNS, completion_latency, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

SUMMARY_COLUMNS = ("param_value", "final_test_acc", "completion_latency_s", "cum_bits_up")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def _write(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    Path(path).write_text(text, encoding="utf-8", newline="")


def _load(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
        cfg = type(cfg).model_validate(cfg.model_dump())
    return cfg


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
        records = run_experiment(cfg)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _write(args.out, records_csv(records))
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    _log(args, f"{len(records)} rounds written")
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    values = []
    for item in text.split(","):
        item = item.strip()
        if item:
            v = float(item)
            values.append(int(v) if v.is_integer() and "." not in item and "e" not in item.lower() else v)
    if not values:
        raise ValueError("empty grid")
    return values


def cmd_sweep(args) -> int:
    try:
        base = _load(args)
        grid = _parse_grid(args.grid)
        points = [with_value(base, args.param, v).model_copy(update={"seed": base.seed + i}) for i, v in enumerate(grid)]
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"sweep error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    rows = []
    for i, (value, cfg) in enumerate(zip(grid, points)):
        try:
            records = run_experiment(cfg)
        except ValueError as exc:
            print(f"point {i} ({args.param}={value}) failed: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            (out / f"point_{i:03d}.csv").write_text(records_csv(records), encoding="utf-8", newline="")
        except OSError as exc:
            print(f"cannot write output: {exc}", file=sys.stderr)
            return EXIT_IO
        last = records[-1] if records else None
        rows.append(
            (
                value,
                None if last is None else last.test_acc,
                completion_latency(records, cfg.target_loss),
                0 if last is None else last.cum_bits_up,
            )
        )
        _log(args, f"point {i}: {args.param}={value}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    try:
        (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def bounds_rows(n: int, eps: float, hsize=None, log_hsize=None, vc=None, kl=None) -> dict:
    return bounds.bound_table(n, eps, hsize=hsize, vc=vc, kl=kl, log_hsize=log_hsize)


def cmd_bounds(args) -> int:
    log_hsize = args.log_hsize
    if args.params is not None:
        log_hsize = bounds.log_hypothesis_count(args.params, args.bits)
    try:
        row = bounds_rows(args.n, args.eps, args.hsize, log_hsize, args.vc, args.kl)
    except ValueError as exc:
        print(f"bounds error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not row:
        print("bounds error: give at least one of --hsize/--log-hsize/--params, --vc, --kl", file=sys.stderr)
        return EXIT_CONFIG
    text = "bound,value\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in row.items())
    try:
        _write(args.out, text)
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgemsi", description="Edge distributed-learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=sp.prog.endswith("sweep"), default=None, help=out_help)
        sp.add_argument("--quiet", action="store_true")

    run = sub.add_parser("run", help="run one experiment and write per-round CSV")
    common(run, "output CSV path (stdout when omitted)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run one experiment per grid value")
    common(sweep, "output directory")
    sweep.add_argument("--param", required=True, help="dotted config path, e.g. protocol.hyper.eta")
    sweep.add_argument("--grid", required=True, help="comma-separated values")
    sweep.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bounds", help="print generalization-error bounds")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("--hsize", type=float)
    b.add_argument("--log-hsize", type=float)
    b.add_argument("--params", type=int, help="parameter count for a bits-per-weight hypothesis count")
    b.add_argument("--bits", type=int, default=32)
    b.add_argument("--vc", type=float)
    b.add_argument("--kl", type=float)
    b.add_argument("--out", default=None)
    b.add_argument("--quiet", action="store_true")
    b.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
