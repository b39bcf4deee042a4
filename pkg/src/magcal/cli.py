"""Command-line surface: calibrate, apply, validate, simulate, heading-table.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Failures print a single machine-parseable line to stderr of the form
``magcal: <usage|data|numeric>: <message>``.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import __version__
from .calibration import CalibrationConfig, CalibrationError, calibrate, validate_on
from .ekf import EkfNumericalError
from .evaluate import DegenerateGeometryError, ninety_degree_table
from .initialization import DegenerateDataError, InvalidQuadricError
from .io import (
    DataFormatError,
    load_imu_csv,
    load_report,
    write_calibrated_csv,
    write_mc_table,
    write_report,
)
from .models import InvalidCalibrationError
from .optimize import GradientError, OptimizerConfig
from .simulate import SimConfig, run_monte_carlo

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# pipeline stages whose failures indicate bad input data rather than numerics
_DATA_STAGES = {"stationary selection", "noise initialization", "ellipsoid fit"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # raise instead of exiting so main can tag the error
        raise _UsageError(message)


def _parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        a, b = int(a), int(b)
    except ValueError:
        raise _UsageError(f"expected a half-open sample range 'a:b', got {text!r}") from None
    if a < 0 or b <= a:
        raise _UsageError(f"invalid sample range {text!r}")
    return a, b


def _parse_segments(text: str):
    """Parse 'label=a:b,c:d;label2=...' into (label, [(a, b), ...]) pairs."""
    sequences = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise _UsageError(f"segment group {chunk!r} is missing a 'label=' prefix")
        label, ranges = chunk.split("=", 1)
        parts = [p for p in ranges.split(",") if p.strip()]
        if len(parts) < 2:
            raise _UsageError(f"segment group {label!r} needs at least 2 ranges")
        sequences.append((label.strip(), [_parse_range(p.strip()) for p in parts]))
    if not sequences:
        raise _UsageError("no segment groups given")
    return sequences


def _build_parser() -> _Parser:
    parser = _Parser(prog="magcal", description=__doc__)
    parser.add_argument("--version", action="version", version=f"magcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="estimate calibration parameters from a recording")
    cal.add_argument("--input", required=True, help="input CSV recording")
    cal.add_argument("--stationary", default=None, metavar="A:B",
                     help="half-open sample range of stationary data (default: auto-detect)")
    cal.add_argument("--decimate", type=int, default=1,
                     help="downsampling factor for the likelihood stage (default 1)")
    cal.add_argument("--max-iterations", type=int, default=None,
                     help="optimizer iteration budget (default 100)")
    cal.add_argument("--threads", type=int, default=1,
                     help="worker processes for gradient probes; 0 = all cores")
    cal.add_argument("--out", default=None, help="write the calibration report here")

    app = sub.add_parser("apply", help="append calibrated magnetometer columns to a recording")
    app.add_argument("--input", required=True)
    app.add_argument("--report", required=True)
    app.add_argument("--out", required=True)

    val = sub.add_parser("validate", help="residual statistics of a report on held-out data")
    val.add_argument("--input", required=True)
    val.add_argument("--report", required=True)
    val.add_argument("--out", default=None, help="write the per-sample norm profile here")

    sim = sub.add_parser("simulate", help="Monte Carlo heading-accuracy study")
    sim.add_argument("--trials", type=int, required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--dip", type=float, default=None, metavar="DEG",
                     help="dip angle of the simulated field in degrees")
    sim.add_argument("--samples-per-axis", type=int, default=None,
                     help="rotation samples per axis (default 100)")
    sim.add_argument("--threads", type=int, default=1,
                     help="worker processes for trials; 0 = all cores")
    sim.add_argument("--out", default=None, help="write the per-trial table here")

    head = sub.add_parser("heading-table", help="90-degree rotation deviation table")
    head.add_argument("--input", required=True)
    head.add_argument("--report", required=True)
    head.add_argument("--segments", required=True,
                      help="stationary segments, e.g. 'zup=0:500,600:1100;zdown=...'")
    head.add_argument("--use-initial", action="store_true",
                      help="use the initial estimate instead of the ML estimate")
    return parser


def _cmd_calibrate(args) -> int:
    data = load_imu_csv(args.input)
    config = CalibrationConfig(
        stationary_range=_parse_range(args.stationary) if args.stationary else None,
        decimation=args.decimate,
        optimizer=(OptimizerConfig(max_iterations=args.max_iterations)
                   if args.max_iterations else OptimizerConfig()),
        n_jobs=args.threads,
    )
    result = calibrate(data, config)
    print(f"samples:            {len(data)}")
    print(f"cost initial:       {result.cost_initial:.6f}")
    print(f"cost refined:       {result.cost_refined:.6f}")
    print(f"iterations:         {result.opt_trace.iterations} ({result.opt_trace.status})")
    print(f"residual mean/std:  {result.residuals.mean:.4f} / {result.residuals.std:.4f}")
    print(f"dip angle [deg]:    {math.degrees(result.refined.field.dip):.3f}")
    if result.diagnostics.field_x_nonpositive:
        print("warning: refined field has non-positive horizontal component")
    if args.out:
        echo = {
            "input": args.input,
            "stationary": args.stationary,
            "decimate": args.decimate,
            "threads": args.threads,
        }
        write_report(result, args.out, config_echo=echo)
        print(f"report written to   {args.out}")
    return EXIT_OK


def _cmd_apply(args) -> int:
    data = load_imu_csv(args.input)
    report = load_report(args.report)
    write_calibrated_csv(args.out, data, report.refined.mag)
    print(f"calibrated recording written to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    data = load_imu_csv(args.input)
    report = load_report(args.report)
    result = validate_on(data, report.refined)
    res = result.residuals
    norms = result.norms
    print(f"residuals: count={res.count} mean={res.mean:.4f} std={res.std:.4f} "
          f"kurtosis={res.excess_kurtosis:.3f} outliers={res.outlier_count}")
    print(f"field norm: mean={norms.mean():.4f} min={norms.min():.4f} max={norms.max():.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("sample,norm\n")
            for i, v in enumerate(norms):
                fh.write(f"{i},{format(v, '.17g')}\n")
        print(f"norm profile written to {args.out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    if args.trials < 1:
        raise _UsageError("--trials must be >= 1")
    sim_kwargs = {}
    if args.dip is not None:
        sim_kwargs["dip_deg"] = args.dip
    if args.samples_per_axis is not None:
        sim_kwargs["samples_per_axis"] = args.samples_per_axis
    sim_config = SimConfig(**sim_kwargs)
    records = run_monte_carlo(args.trials, args.seed, sim_config=sim_config, workers=args.threads)
    ok = [r for r in records if r.status == "ok"]
    print(f"trials: {len(records)}  succeeded: {len(ok)}")
    if ok:
        rmse_init = np.array([r.rmse_init_deg for r in ok])
        rmse_ml = np.array([r.rmse_ml_deg for r in ok])
        for name, arr in (("init", rmse_init), ("ml", rmse_ml)):
            q1, q2, q3 = np.percentile(arr, [25, 50, 75])
            print(f"heading RMSE {name:4s} [deg]: q25={q1:.3f} median={q2:.3f} q75={q3:.3f} "
                  f"max={arr.max():.3f}")
        better = int((rmse_ml <= rmse_init).sum())
        print(f"ml <= init in {better}/{len(ok)} trials")
    if args.out:
        write_mc_table(records, args.out)
        print(f"trial table written to {args.out}")
    return EXIT_OK


def _cmd_heading_table(args) -> int:
    data = load_imu_csv(args.input)
    report = load_report(args.report)
    params = report.initial if args.use_initial else report.refined
    sequences = []
    for label, ranges in _parse_segments(args.segments):
        segs = []
        for a, b in ranges:
            if b > len(data):
                raise DataFormatError(f"segment {a}:{b} exceeds recording length {len(data)}")
            segs.append((data.acc[a:b].mean(axis=0), data.mag[a:b].mean(axis=0)))
        sequences.append((label, segs))
    table = ninety_degree_table(sequences, params.mag, params.field)
    for label, devs in zip(table.labels, table.deviations):
        print(f"{label}: " + " ".join(f"{d:+.3f}" for d in devs))
    print(f"mean |deviation| [deg]: {table.mean_abs:.3f}")
    print(f"max  |deviation| [deg]: {table.max_abs:.3f}")
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "apply": _cmd_apply,
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "heading-table": _cmd_heading_table,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"magcal: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as exc:
        if exc.stage in _DATA_STAGES or isinstance(
            exc.__cause__, (DegenerateDataError, InvalidQuadricError, DataFormatError)
        ):
            print(f"magcal: data: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"magcal: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EkfNumericalError, GradientError, np.linalg.LinAlgError) as exc:
        print(f"magcal: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, DegenerateDataError, InvalidQuadricError,
            InvalidCalibrationError, DegenerateGeometryError, OSError, ValueError) as exc:
        print(f"magcal: data: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
