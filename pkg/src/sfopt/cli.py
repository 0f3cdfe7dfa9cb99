"""``bench`` command line: run, overhead, plotdata, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--passes", type=float, default=None, help="effective-pass budget")
    common.add_argument("--quiet", action="store_true", help="only report errors")

    parser = argparse.ArgumentParser(prog="bench", description="SFO benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the optimizers in a config file")
    p.add_argument("config")

    p = sub.add_parser("overhead", parents=[common], help="measure optimizer overhead scaling")
    p.add_argument("--m-list", type=_int_list, default=[1000, 10000, 100000])
    p.add_argument("--n-list", type=_int_list, default=[10, 20, 40])
    p.add_argument("--fixed-n", type=int, default=20)
    p.add_argument("--fixed-m", type=int, default=10000)
    p.add_argument("--repeats", type=int, default=bench.OVERHEAD_REPEATS)

    p = sub.add_parser("plotdata", parents=[common], help="merge trace CSVs into one table")
    p.add_argument("trace_dir")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a config's problem")
    p.add_argument("config")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _run(args) -> int:
    config = bench.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.passes is not None:
        if args.passes < 0:
            raise ConfigError("--passes must be >= 0")
        config.passes = args.passes
    summary = bench.run_benchmark(config, out_dir=args.out, quiet=args.quiet)
    if not args.quiet:
        for name, best in summary["best"].items():
            print(f"best {name}: {best['hyperparams']} final={best['final_objective']:.10g}")
    failed = [r["run_id"] for r in summary["runs"] if r.get("status") == "failed"]
    if failed:
        print(f"failed runs: {', '.join(failed)}", file=sys.stderr)
    return EXIT_OK


def _overhead(args) -> int:
    result = bench.measure_overhead(args.m_list, args.n_list, passes=args.passes or 3,
                                    fixed_N=args.fixed_n, fixed_M=args.fixed_m, repeats=args.repeats,
                                    seed=args.seed or 0, out_dir=args.out)
    if not args.quiet:
        for key in ("m_sweep", "n_sweep"):
            for r in result[key]:
                flag = "" if r["reliable"] else "  (unreliable)"
                print(f"M={r['M']:>7d} N={r['N']:>4d} {r['seconds_per_pass'] * 1e3:10.3f} ms/pass{flag}")
        print(f"slope in M: {result['slope_M']}")
        print(f"slope in N: {result['slope_N']}")
    return EXIT_OK


def _plotdata(args) -> int:
    path = bench.emit_plot_data(args.trace_dir, None if args.out is None else args.out)
    if not args.quiet:
        print(path)
    return EXIT_OK


def _gradcheck(args) -> int:
    config = bench.load_config(args.config)
    result = bench.gradcheck(config.problem, points=args.points,
                             seed=args.seed if args.seed is not None else config.seed)
    if not args.quiet:
        print(json.dumps(result, indent=2))
    return EXIT_OK if result["max_error"] <= args.tolerance else EXIT_RUNTIME


COMMANDS = {"run": _run, "overhead": _overhead, "plotdata": _plotdata, "gradcheck": _gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
