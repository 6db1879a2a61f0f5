"""Command line front end: simulate, summarize, bounds.

All three subcommands speak files only (JSON config in, CSV out), so
runs are scriptable and the outputs feed the plotting tools directly.
Exit status is 0 only when every requested cell succeeded.
"""

import argparse
import os
import sys

from .bounds import write_bounds_csv, BOUNDS_CSV_COLUMNS
from .harness import (
    ConfigError, load_config, run_sweep, summarize, write_summary_csv,
    equal_error_point, bounds_rows, SUMMARY_METRICS,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="turboisac",
        description="Monte Carlo sweeps for joint activity detection, "
                    "channel estimation and localization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the configured sweep")
    sim.add_argument("--config", required=True, help="JSON config file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--workers", type=int, default=1,
                     help="parallel worker processes (default 1)")
    sim.add_argument("--resume", action="store_true",
                     help="skip cells already present in results.csv")

    summ = sub.add_parser("summarize", help="aggregate a results file")
    summ.add_argument("--in", dest="infile", required=True,
                      help="results.csv from a simulate run")
    summ.add_argument("--out", dest="outfile", default=None,
                      help="summary CSV path (default <in dir>/summary.csv)")

    bnd = sub.add_parser("bounds", help="write bound and prediction curves")
    bnd.add_argument("--config", required=True, help="JSON config file")
    bnd.add_argument("--out", required=True, help="output directory")
    bnd.add_argument("--samples", type=int, default=1000,
                     help="prior draws for the position bound (default 1000)")
    bnd.add_argument("--se-trials", type=int, default=10,
                     help="matched runs calibrating the prediction (default 10)")
    return parser


def _cmd_simulate(args):
    scene_cfg, geometry, turbo_cfg, sweep = load_config(args.config)
    report = run_sweep(
        scene_cfg, turbo_cfg, sweep, args.out, geometry=geometry,
        resume=args.resume, workers=args.workers,
        progress=lambda msg: print(msg, flush=True),
    )
    print(f"wrote {report['rows_written']} rows to {report['results_path']} "
          f"({report['failures']} failed cells)")
    return 0 if report["failures"] == 0 else 1


def _format_cell(val):
    if val == "" or val is None:
        return "-"
    if isinstance(val, float):
        return f"{val:.4g}"
    return str(val)


def _cmd_summarize(args):
    rows = summarize(args.infile)
    if not rows:
        print("no rows to summarize", file=sys.stderr)
        return 1
    headers = ["scheme", "sweep_value", "n_trials", "n_errors"]
    for metric in SUMMARY_METRICS:
        headers += [f"{metric}_mean", f"{metric}_ci95"]
    widths = [max(len(h), 10) for h in headers]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in rows:
        cells = [_format_cell(row.get(h, "")) for h in headers]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))

    if rows and rows[0]["sweep_variable"] == "threshold":
        for scheme in sorted({r["scheme"] for r in rows}):
            try:
                pt = equal_error_point(rows, scheme)
                print(f"equal-error point of {scheme}: threshold "
                      f"{pt['value']:.4g} at rate {pt['rate']:.4g}")
            except ValueError as exc:
                print(f"equal-error point of {scheme}: {exc}")

    outfile = args.outfile
    if outfile is None:
        outfile = os.path.join(os.path.dirname(os.path.abspath(args.infile)),
                               "summary.csv")
    write_summary_csv(outfile, rows)
    print(f"summary written to {outfile}")
    return 0


def _cmd_bounds(args):
    scene_cfg, geometry, turbo_cfg, sweep = load_config(args.config)
    schemes = set(sweep.schemes) & {"bcrb", "se"}
    if not schemes:
        print("config requests neither 'bcrb' nor 'se'; nothing to do",
              file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    rows = bounds_rows(
        scene_cfg, turbo_cfg, sweep, geometry=geometry,
        n_samples=args.samples, se_trials=args.se_trials,
        progress=lambda msg: print(msg, flush=True),
    )
    path = os.path.join(args.out, "bounds.csv")
    write_bounds_csv(path, rows)
    print(f"wrote {len(rows)} rows ({', '.join(sorted(schemes))}) "
          f"with columns {','.join(BOUNDS_CSV_COLUMNS)} to {path}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "summarize":
            return _cmd_summarize(args)
        if args.command == "bounds":
            return _cmd_bounds(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return 2
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
