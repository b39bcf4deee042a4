"""Plain-text data ingestion and result serialization.

Sensor recordings are delimited text with the exact header
``t,gx,gy,gz,ax,ay,az,mx,my,mz`` (seconds, rad/s, m/s^2, raw magnetometer
units).  Calibration reports are JSON documents; parameters are stored as
the packed 34-vector whose floats round-trip bit-exactly, alongside a
redundant human-readable expansion.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import __version__
from .calibration import CalibrationResult
from .models import CalibrationParams, ImuDataset, MagCalibration, apply_calibration, pack_params, unpack_params

REPORT_FORMAT_VERSION = 1

CSV_COLUMNS = ("t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz")

MC_TABLE_COLUMNS = ("seed", "status", "rmse_init_deg", "rmse_ml_deg", "cost_init", "cost_ml",
                    "iterations")


class DataFormatError(ValueError):
    """Malformed input file; the message carries the path and line."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def load_imu_csv(path) -> ImuDataset:
    """Read a sensor recording, rejecting rows with non-finite fields."""
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        if header != list(CSV_COLUMNS):
            missing = [c for c in CSV_COLUMNS if c not in header]
            raise DataFormatError(
                f"{path}: bad header {header!r}"
                + (f", missing columns {missing}" if missing else "")
            )
        rows = []
        lines = []
        skipped = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}"
                )
            try:
                values = [float(x) for x in row]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: unparseable numeric field") from None
            if not all(math.isfinite(v) for v in values):
                skipped.append(lineno)
                continue
            rows.append(values)
            lines.append(lineno)
    if skipped:
        shown = ", ".join(str(x) for x in skipped[:10])
        if len(skipped) > 10:
            shown += ", ..."
        warnings.warn(
            f"{path}: skipped {len(skipped)} rows with non-finite values (lines {shown})",
            RuntimeWarning,
        )
    if not rows:
        raise DataFormatError(f"{path}: no valid data rows")
    arr = np.array(rows)
    t = arr[:, 0]
    if t.shape[0] > 1:
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise DataFormatError(
                f"{path}:{lines[int(bad[0]) + 1]}: timestamp not strictly increasing"
            )
    return ImuDataset(t, arr[:, 1:4], arr[:, 4:7], arr[:, 7:10])


def write_imu_csv(path, data: ImuDataset) -> None:
    """Write a recording in the load_imu_csv schema (17 significant digits)."""
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i in range(len(data)):
            row = [data.time[i], *data.gyro[i], *data.acc[i], *data.mag[i]]
            writer.writerow([_fmt(v) for v in row])


def write_calibrated_csv(path, data: ImuDataset, cal: MagCalibration) -> None:
    """Write a recording with calibrated magnetometer columns appended."""
    calibrated = apply_calibration(data.mag, cal)
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS + ("mx_cal", "my_cal", "mz_cal"))
        for i in range(len(data)):
            row = [data.time[i], *data.gyro[i], *data.acc[i], *data.mag[i], *calibrated[i]]
            writer.writerow([_fmt(v) for v in row])


def _params_block(params: CalibrationParams) -> dict:
    noise = params.noise
    return {
        "theta": pack_params(params).tolist(),
        "distortion": params.mag.distortion.tolist(),
        "offset": params.mag.offset.tolist(),
        "dip_rad": params.field.dip,
        "field": params.field.vector.tolist(),
        "gyro_bias": noise.gyro_bias.tolist(),
        "cov_gyro": noise.cov_gyro.tolist(),
        "cov_acc": noise.cov_acc.tolist(),
        "cov_mag": noise.cov_mag.tolist(),
    }


@dataclass(frozen=True, eq=False)
class ReportDocument:
    """Loaded calibration report with reconstructed parameters."""

    format_version: int
    tool_version: str
    config: dict
    initial: CalibrationParams
    refined: CalibrationParams
    optimization: dict
    residuals: dict
    diagnostics: dict


def report_document(result: CalibrationResult, config_echo: dict | None = None) -> dict:
    """Serializable report for a calibration result."""
    trace = result.opt_trace
    residuals = result.residuals
    diag = result.diagnostics
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "tool_version": __version__,
        "config": dict(config_echo or {}),
        "initial": _params_block(result.initial),
        "refined": _params_block(result.refined),
        "optimization": {
            "status": trace.status,
            "iterations": trace.iterations,
            "cost_initial": result.cost_initial,
            "cost_refined": result.cost_refined,
            "costs": list(trace.costs),
            "step_lengths": list(trace.step_lengths),
        },
        "residuals": {
            "count": residuals.count,
            "mean": residuals.mean,
            "std": residuals.std,
            "excess_kurtosis": residuals.excess_kurtosis,
            "outlier_count": residuals.outlier_count,
            "histogram": {
                "bin_edges": residuals.bin_edges.tolist(),
                "bin_counts": residuals.bin_counts.tolist(),
            },
        },
        "diagnostics": {
            "pd_projected": diag.pd_projected,
            "stationarity_warning": diag.stationarity_warning,
            "misalignment_converged": diag.misalignment_converged,
            "misalignment_residual": diag.misalignment_residual,
            "optimizer_status": diag.optimizer_status,
            "regularization_count": diag.regularization_count,
            "field_x_nonpositive": diag.field_x_nonpositive,
        },
    }


def write_report(result: CalibrationResult, path, config_echo: dict | None = None) -> None:
    """Serialize a calibration result to a JSON report file."""
    doc = report_document(result, config_echo)
    with open(str(path), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_report(path) -> ReportDocument:
    """Load a report; parameters are rebuilt bit-exactly from the packed vectors."""
    path = str(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a valid report file ({exc})") from exc
    try:
        version = doc["format_version"]
        if version != REPORT_FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format_version {version}")
        initial = unpack_params(np.array(doc["initial"]["theta"]))
        refined = unpack_params(np.array(doc["refined"]["theta"]))
    except KeyError as exc:
        raise DataFormatError(f"{path}: report is missing field {exc}") from exc
    return ReportDocument(
        format_version=version,
        tool_version=doc.get("tool_version", ""),
        config=doc.get("config", {}),
        initial=initial,
        refined=refined,
        optimization=doc.get("optimization", {}),
        residuals=doc.get("residuals", {}),
        diagnostics=doc.get("diagnostics", {}),
    )


def write_mc_table(records, path) -> None:
    """Write Monte Carlo records as a delimited table, one row per trial."""
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MC_TABLE_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.seed,
                    rec.status,
                    _fmt(rec.rmse_init_deg),
                    _fmt(rec.rmse_ml_deg),
                    _fmt(rec.cost_init),
                    _fmt(rec.cost_ml),
                    rec.iterations,
                ]
            )
