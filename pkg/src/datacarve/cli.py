"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 solver failure. Errors go to standard error prefixed with ``E:<code>:``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .carve import CarveFit, CarveInput, carve_study
from .core import StudySummary, center_columns, compute_moment_summary, read_csv_dataset
from .errors import CarveError, ConfigurationError
from .lasso import default_lambda, extract_selection, fit_weighted_lasso, kkt_residual
from .protocol import aggregate, read_summary, write_aggregate, write_summary
from .sim import (
    DEFAULT_LAMBDA_MULT,
    TABLE_COLUMNS,
    SimConfig,
    default_threads,
    figure2_experiment,
    read_table,
    run_monte_carlo,
    summarize_table,
    write_samples,
    write_table,
)

EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="datacarve", allow_abbrev=False,
                     description="Carved treatment-effect estimation from study summaries.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("summarize", allow_abbrev=False,
                       help="select a model on one study and export its summary")
    p.add_argument("--data", required=True, help="study CSV with columns y,d1..ds,x1..xp")
    p.add_argument("--sigma", required=True, type=_positive_float, help="noise scale for the penalty")
    p.add_argument("--lambda-mult", type=_positive_float, default=DEFAULT_LAMBDA_MULT,
                   help=f"penalty multiplier c (default {DEFAULT_LAMBDA_MULT})")
    p.add_argument("--r", type=float, default=None, help="existing-study share n/N")
    p.add_argument("--n-total", type=_positive_int, default=None,
                   help="study size plus validation size N")
    p.add_argument("--study-id", default=None, help="identifier written into the summary")
    p.add_argument("--diagnostics", default=None, help="optional JSON report of the LASSO fit")
    p.add_argument("--out", required=True, help="output path (*.carve-summary.json)")

    p = sub.add_parser("carve", allow_abbrev=False, help="carve one summary against validation data")
    p.add_argument("--summary", required=True, help="summary JSON from 'summarize'")
    p.add_argument("--validation", required=True,
                   help="validation CSV with the same p covariate columns as the study")
    p.add_argument("--out", required=True, help="output fit JSON")

    p = sub.add_parser("aggregate", allow_abbrev=False, help="average carved estimates across studies")
    p.add_argument("--fits", required=True, nargs="+", help="fit JSON files from 'carve'")
    p.add_argument("--weights", choices=("simple", "size"), default="simple",
                   help="equal weights or weights proportional to N_k")
    p.add_argument("--out", required=True, help="output JSON; a CSV table is written alongside")

    p = sub.add_parser("simulate", allow_abbrev=False, help="run the Monte Carlo harness")
    p.add_argument("--setting", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--k", type=_positive_int, default=3, help="number of existing studies")
    p.add_argument("--sigma", type=_positive_float, default=2.0, help="noise scale")
    p.add_argument("--reps", type=_positive_int, default=200)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--lambda-mult", type=_positive_float, default=DEFAULT_LAMBDA_MULT)
    p.add_argument("--n-val", type=_positive_int, default=50)
    p.add_argument("--n-study", type=_positive_int, default=100)
    p.add_argument("--small", action="store_true", help="reduced dimensions (p_k=120, p=150)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: CARVE_THREADS or the core count)")
    p.add_argument("--figure2", action="store_true",
                   help="run the single-covariate experiment and write samples instead")
    p.add_argument("--rho", type=float, default=0.5, help="treatment-covariate correlation (--figure2)")
    p.add_argument("--r-half", action="store_true",
                   help="equal existing and validation sizes (--figure2)")
    p.add_argument("--out", default=None, help="output CSV (default table.csv or samples.csv)")

    p = sub.add_parser("report", allow_abbrev=False, help="pretty-print a table.csv")
    p.add_argument("--in", dest="infile", required=True, help="table CSV from 'simulate'")
    return parser


def _resolve_split(n, r, n_total):
    if r is not None and not 0 < r < 1:
        raise UsageError("summarize: --r must lie in (0, 1)")
    if n_total is None:
        n_total = int(round(n / r))
    if r is not None and abs(r - n / n_total) > 1e-9:
        raise UsageError(f"summarize: --r {r} disagrees with n/N = {n}/{n_total}")
    if n_total <= n:
        raise UsageError(f"summarize: N={n_total} must exceed the study size n={n}")
    return n / n_total, n_total


def _cmd_summarize(args, out):
    if args.n_total is None and args.r is None:
        raise UsageError("summarize: give --n-total or --r")
    data = read_csv_dataset(args.data, study_id=args.study_id)
    r, N = _resolve_split(data.n, args.r, args.n_total)
    data = center_columns(data)
    lam = default_lambda(data.n, data.p, args.sigma, N, args.lambda_mult)
    fit = fit_weighted_lasso(data, lam, r, N)
    sel = extract_selection(fit)
    summary = StudySummary(sel, compute_moment_summary(data, sel), p=data.p, s=data.s,
                           study_id=data.study_id)
    write_summary(summary, args.out)
    if args.diagnostics:
        active, slack = kkt_residual(fit, data)
        report = {
            "study_id": data.study_id, "n": data.n, "p": data.p, "r": r, "n_total": N,
            "selected": list(sel.selected), "alpha_l": fit.alpha_l.tolist(),
            "objective": fit.objective, "sweeps": fit.sweeps,
            "kkt_active_residual": active, "kkt_inactive_slack": slack,
        }
        Path(args.diagnostics).write_text(json.dumps(report, indent=2) + "\n")
    print(f"{data.study_id}: selected {sel.q} of {data.p} covariates -> {args.out}", file=out)


def _cmd_carve(args, out):
    summary = read_summary(args.summary)
    validation = center_columns(read_csv_dataset(args.validation, s=summary.s, study_id="validation"))
    fit = carve_study(CarveInput.from_validation(summary, validation))
    Path(args.out).write_text(json.dumps(fit.to_dict(), indent=2) + "\n")
    print(f"{fit.study_id}: alpha_carve = {fit.alpha_carve.tolist()} -> {args.out}", file=out)


def _cmd_aggregate(args, out):
    fits = []
    for path in args.fits:
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read fit {path}: {exc}") from None
        fits.append(CarveFit.from_dict(obj))
    result = aggregate(fits, args.weights)
    json_path = Path(args.out)
    write_aggregate(result, json_path, json_path.with_suffix(".csv"))
    print(f"alpha_tilde = {result.alpha_tilde.tolist()} over {len(fits)} studies -> {args.out}", file=out)


def _cmd_simulate(args, out):
    threads = args.threads if args.threads is not None else default_threads()
    if args.figure2:
        n_ex, n_val = (100, 100) if args.r_half else (50, 100)
        res = figure2_experiment(args.seed, args.reps, rho=args.rho, n_existing=n_ex, n_val=n_val,
                                 c=args.lambda_mult)
        path = args.out or "samples.csv"
        write_samples(res, path)
        print(f"figure2: r={res.r:.4g}, kept {args.reps} of {res.n_tried} draws -> {path}", file=out)
        return
    kw = dict(setting=args.setting, K=args.k, sigma_eps=args.sigma, reps=args.reps, seed=args.seed,
              lambda_multiplier=args.lambda_mult, n_val=args.n_val, n_study=args.n_study)
    config = SimConfig.small(**kw) if args.small else SimConfig(**kw)
    records = run_monte_carlo(config, threads=threads)
    rows = summarize_table(records, setting=args.setting, sigma=args.sigma, K=args.k)
    path = args.out or "table.csv"
    write_table(rows, path)
    print(f"setting {args.setting}, sigma={args.sigma}, K={args.k}: {args.reps} replications -> {path}",
          file=out)


def _cmd_report(args, out):
    rows = read_table(args.infile)
    widths = {c: max(len(c), *(len(_short(r[c])) for r in rows)) if rows else len(c) for c in TABLE_COLUMNS}
    print("  ".join(c.rjust(widths[c]) for c in TABLE_COLUMNS), file=out)
    for r in rows:
        print("  ".join(_short(r[c]).rjust(widths[c]) for c in TABLE_COLUMNS), file=out)


def _short(text):
    try:
        v = float(text)
    except ValueError:
        return text
    if text.lstrip("-").isdigit():
        return text
    return f"{v:.4f}" if np.isfinite(v) else text


COMMANDS = {
    "summarize": _cmd_summarize,
    "carve": _cmd_carve,
    "aggregate": _cmd_aggregate,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
}


def main(argv=None, out=None, err=None) -> int:
    """Run the CLI in-process and return its exit code."""
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"E:{exc.exit_code}: {exc}", file=err)
        return exc.exit_code
    except CarveError as exc:
        print(f"E:{exc.exit_code}: {exc}", file=err)
        return exc.exit_code
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
