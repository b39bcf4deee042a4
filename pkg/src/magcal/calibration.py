"""End-to-end calibration: initialization, ML refinement, validation report.

``calibrate`` chains the initialization stages (noise statistics, ellipsoid
fit, inclination-only filter, misalignment) into a starting point and then
minimizes the filter's negative log-likelihood over all 34 parameters.
Everything is deterministic for fixed inputs; the only concurrency is the
optional fan-out of gradient probe evaluations over worker processes,
which does not change any numerical result.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ekf import EkfConfig, EkfNumericalError, ekf_run, nll_cost
from .evaluate import ResidualStats, norm_profile, residual_stats
from .initialization import (
    MIN_STATIONARY_SAMPLES,
    build_initial,
    detect_stationary_prefix,
    estimate_misalignment,
    fit_ellipsoid,
    initial_noise_estimates,
    recover_cal,
    stationary_motion_ratio,
)
from .models import (
    CalibrationParams,
    ImuDataset,
    InvalidCalibrationError,
    LocalField,
    MagCalibration,
    pack_params,
    unpack_params,
)
from .optimize import OptimizerConfig, OptTrace, minimize


class CalibrationError(RuntimeError):
    """Failure in a named stage of the calibration pipeline."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True, eq=False)
class CalibrationConfig:
    """Pipeline settings; defaults suit 100 Hz recordings of a few minutes."""

    stationary_range: tuple | None = None  # half-open sample range, None = auto-detect
    decimation: int = 1  # ML-stage downsampling factor, 1 = off
    ekf: EkfConfig = field(default_factory=EkfConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    n_jobs: int = 1  # worker processes for gradient probes; 0 = all cores


@dataclass(frozen=True, eq=False)
class CalibrationDiagnostics:
    pd_projected: bool
    stationarity_warning: bool
    misalignment_converged: bool
    misalignment_residual: float
    optimizer_status: str
    regularization_count: int
    field_x_nonpositive: bool


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    initial: CalibrationParams
    refined: CalibrationParams
    cost_initial: float
    cost_refined: float
    opt_trace: OptTrace
    residuals: ResidualStats
    diagnostics: CalibrationDiagnostics


@dataclass(frozen=True, eq=False)
class ValidationResult:
    residuals: ResidualStats
    norms: np.ndarray


def _cost_of_vector(data: ImuDataset, vec: np.ndarray, ekf_config: EkfConfig) -> float:
    """NLL of a packed parameter vector; invalid parameter points cost +inf."""
    try:
        params = unpack_params(vec)
    except InvalidCalibrationError:
        return math.inf
    return nll_cost(data, params, ekf_config)


_WORKER_STATE: dict = {}


def _probe_worker_init(time, gyro, acc, mag, ekf_config):
    _WORKER_STATE["data"] = ImuDataset(time, gyro, acc, mag)
    _WORKER_STATE["config"] = ekf_config


def _probe_worker_cost(vec):
    return _cost_of_vector(_WORKER_STATE["data"], vec, _WORKER_STATE["config"])


def calibrate(data: ImuDataset, config: CalibrationConfig | None = None) -> CalibrationResult:
    """Run the full calibration pipeline on one recording."""
    if config is None:
        config = CalibrationConfig()

    # --- stationary segment ------------------------------------------------
    if config.stationary_range is not None:
        a, b = config.stationary_range
    else:
        a, b = 0, detect_stationary_prefix(data)
    if b - a < MIN_STATIONARY_SAMPLES:
        raise CalibrationError(
            "stationary selection",
            f"stationary range {a}:{b} is shorter than {MIN_STATIONARY_SAMPLES} samples; "
            "record a stationary prefix or pass an explicit range",
        )
    stationary = data.slice(a, b)

    try:
        noise0 = initial_noise_estimates(stationary)
    except ValueError as exc:
        raise CalibrationError("noise initialization", str(exc)) from exc
    stationarity_warning = stationary_motion_ratio(stationary) > 3.0

    # --- ellipsoid fit -----------------------------------------------------
    try:
        quadric = fit_ellipsoid(data.mag)
        d_tilde, o0 = recover_cal(quadric)
    except ValueError as exc:
        raise CalibrationError("ellipsoid fit", str(exc)) from exc

    # --- inclination-only filter (no magnetometer) -------------------------
    # field and mag calibration are unused when the magnetometer is disabled
    incl_params = CalibrationParams(
        mag=MagCalibration.identity(), field=LocalField(0.0), noise=noise0
    )
    incl_config = replace(config.ekf, use_magnetometer=False)
    try:
        incl_run = ekf_run(data, incl_params, incl_config)
    except EkfNumericalError as exc:
        raise CalibrationError("inclination filter", str(exc)) from exc

    # --- misalignment and assembled initial estimate -----------------------
    try:
        mis = estimate_misalignment(data, incl_run, d_tilde, o0)
        init = build_initial(d_tilde, o0, mis, noise0, quadric.pd_projected)
    except ValueError as exc:
        raise CalibrationError("misalignment", str(exc)) from exc

    # --- maximum likelihood refinement --------------------------------------
    est_data = data.decimate(config.decimation)
    theta0 = pack_params(init.params)

    def cost(vec):
        return _cost_of_vector(est_data, vec, config.ekf)

    cost0 = cost(theta0)
    if not math.isfinite(cost0):
        raise CalibrationError("ml refinement", "cost is not finite at the initial estimate")

    executor = None
    probe_map = None
    n_jobs = config.n_jobs if config.n_jobs != 0 else (os.cpu_count() or 1)
    try:
        if n_jobs > 1:
            executor = ProcessPoolExecutor(
                max_workers=n_jobs,
                initializer=_probe_worker_init,
                initargs=(est_data.time, est_data.gyro, est_data.acc, est_data.mag, config.ekf),
            )
            probe_map = lambda pts: executor.map(
                _probe_worker_cost, [np.asarray(p) for p in pts], chunksize=4
            )
        theta_ml, trace = minimize(cost, theta0, config.optimizer, probe_map)
    finally:
        if executor is not None:
            executor.shutdown()

    refined = unpack_params(theta_ml)
    cost_ml = cost(theta_ml)

    # --- validation statistics at the refined parameters --------------------
    try:
        final_run = ekf_run(data, refined, config.ekf)
    except EkfNumericalError as exc:
        raise CalibrationError("validation", str(exc)) from exc
    stats = residual_stats(final_run, data)

    diagnostics = CalibrationDiagnostics(
        pd_projected=bool(quadric.pd_projected),
        stationarity_warning=bool(stationarity_warning),
        misalignment_converged=bool(mis.converged),
        misalignment_residual=float(mis.residual),
        optimizer_status=trace.status,
        regularization_count=int(final_run.regularization_count),
        field_x_nonpositive=bool(refined.field.vector[0] <= 0.0),
    )
    return CalibrationResult(
        initial=init.params,
        refined=refined,
        cost_initial=cost0,
        cost_refined=cost_ml,
        opt_trace=trace,
        residuals=stats,
        diagnostics=diagnostics,
    )


def validate_on(data: ImuDataset, params: CalibrationParams,
                config: EkfConfig | None = None) -> ValidationResult:
    """Residual statistics and field-norm profile of fixed parameters on held-out data."""
    if not np.any(data.mag):
        raise ValueError("magnetometer channel is empty")
    run = ekf_run(data, params, config)
    return ValidationResult(
        residuals=residual_stats(run, data),
        norms=norm_profile(data, params.mag),
    )
