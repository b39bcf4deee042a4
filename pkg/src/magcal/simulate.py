"""Monte Carlo data generation and the heading-accuracy study.

A trial draws true parameters from the study's uniform ranges, simulates a
short recording (stationary prefix, then one full revolution about each
body axis with zero translational acceleration), calibrates it, and scores
the heading RMSE of the filter run with the initial and with the refined
parameters.  Every trial is deterministic given its seed; trial seeds are
derived from the master seed with a splitmix64 step so trials can run
concurrently in any order.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .calibration import CalibrationConfig, calibrate
from .ekf import ekf_run
from .models import (
    GRAVITY_NAV,
    CalibrationParams,
    ImuDataset,
    LocalField,
    MagCalibration,
    NoiseModel,
)
from .so3 import exp_map, quat_multiply

# Dip angle of the local field used by the study (Linkoping, Sweden).
DEFAULT_DIP_DEG = 71.2

TRANSIENT_DISCARD = 50  # filter settling samples excluded from the RMSE


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Trajectory and field settings for simulated recordings."""

    stationary_samples: int = 100
    samples_per_axis: int = 100
    rate_hz: float = 100.0
    rotation_rate: float = 2.0 * math.pi  # rad/s body rate during each revolution
    dip_deg: float = DEFAULT_DIP_DEG


@dataclass(frozen=True, eq=False)
class SimScenario:
    """True parameters plus the ground-truth trajectory of one trial."""

    params: CalibrationParams
    time: np.ndarray  # (N,)
    quaternions: np.ndarray  # (N, 4) true q_nb per sample
    rates: np.ndarray  # (N, 3) true body rate driving the step into each sample
    seed: int


@dataclass(frozen=True, eq=False)
class McRecord:
    """Outcome of a single Monte Carlo trial."""

    trial: int
    seed: int
    status: str  # "ok" or "failed: <stage>"
    params_true: CalibrationParams
    params_init: CalibrationParams | None
    params_ml: CalibrationParams | None
    rmse_init_deg: float
    rmse_ml_deg: float
    cost_init: float
    cost_ml: float
    iterations: int


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step (64-bit avalanche of x + golden gamma)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def trial_seed(master_seed: int, trial: int) -> int:
    """Deterministic per-trial seed: splitmix64(master XOR trial index)."""
    return splitmix64((master_seed & _MASK64) ^ (trial & _MASK64))


def sample_true_params(rng: np.random.Generator, dip_deg: float = DEFAULT_DIP_DEG) -> CalibrationParams:
    """Draw true calibration parameters from the study's uniform ranges.

    D = D_diag * D_skew * D_rot with diagonal gains U(0.5, 1.5),
    non-orthogonality angles U(-30, 30) deg, alignment rotation angles
    U(-10, 10) deg; offset and gyro bias entries U(-1, 1); diagonal noise
    variances U(1e-3, 1e-2) for the gyro and U(1e-3, 1e-1) for the
    accelerometer and magnetometer.  Draw order is fixed for determinism.
    """
    gains = rng.uniform(0.5, 1.5, size=3)
    zeta, eta, rho = rng.uniform(math.radians(-30.0), math.radians(30.0), size=3)
    psi, theta, phi = rng.uniform(math.radians(-10.0), math.radians(10.0), size=3)
    offset = rng.uniform(-1.0, 1.0, size=3)
    bias = rng.uniform(-1.0, 1.0, size=3)
    var_gyro = rng.uniform(1e-3, 1e-2, size=3)
    var_acc = rng.uniform(1e-3, 1e-1, size=3)
    var_mag = rng.uniform(1e-3, 1e-1, size=3)

    d_skew = np.array(
        [
            [1.0, 0.0, 0.0],
            [math.sin(zeta), math.cos(zeta), 0.0],
            [-math.sin(eta), math.cos(eta) * math.sin(rho), math.cos(eta) * math.cos(rho)],
        ]
    )
    cz, sz = math.cos(psi), math.sin(psi)
    cy, sy = math.cos(theta), math.sin(theta)
    cx, sx = math.cos(phi), math.sin(phi)
    d_rot = (
        np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
        @ np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
        @ np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    )
    distortion = np.diag(gains) @ d_skew @ d_rot

    return CalibrationParams(
        mag=MagCalibration(distortion, offset),
        field=LocalField(math.radians(dip_deg)),
        noise=NoiseModel.from_covariances(bias, np.diag(var_gyro), np.diag(var_acc), np.diag(var_mag)),
    )


def generate_trajectory(config: SimConfig | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth (time, quaternions, rates) for the rotation profile.

    The rate at index t is the constant body rate over the interval ending
    at sample t, so each revolution closes exactly at its last sample:
    with the defaults, samples 0-99 are stationary and samples 199, 299
    and 399 return to the start orientation.
    """
    if config is None:
        config = SimConfig()
    per_axis = config.samples_per_axis
    n = config.stationary_samples + 3 * per_axis
    dt = 1.0 / config.rate_hz
    time = np.arange(n) * dt

    rates = np.zeros((n, 3))
    for axis in range(3):
        start = config.stationary_samples + axis * per_axis
        rates[start:start + per_axis, axis] = config.rotation_rate

    quats = np.empty((n, 4))
    quats[0] = np.array([1.0, 0.0, 0.0, 0.0])
    for t in range(1, n):
        quats[t] = quat_multiply(quats[t - 1], exp_map(rates[t] * dt))
    return time, quats, rates


def make_scenario(seed: int, config: SimConfig | None = None) -> SimScenario:
    """Sample parameters and build the ground-truth trajectory for one trial."""
    if config is None:
        config = SimConfig()
    rng = np.random.default_rng(seed)
    params = sample_true_params(rng, config.dip_deg)
    time, quats, rates = generate_trajectory(config)
    return SimScenario(params=params, time=time, quaternions=quats, rates=rates, seed=seed)


def _rotate_into_body(quats: np.ndarray, v_nav: np.ndarray) -> np.ndarray:
    """R_bn @ v for each quaternion, vectorized (rows of R_nb^T v)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    # columns of R_nb are the body axes in nav coordinates; dot each with v
    r = np.empty((quats.shape[0], 3))
    v0, v1, v2 = v_nav
    r[:, 0] = (1 - 2 * (y * y + z * z)) * v0 + 2 * (x * y + w * z) * v1 + 2 * (x * z - w * y) * v2
    r[:, 1] = 2 * (x * y - w * z) * v0 + (1 - 2 * (x * x + z * z)) * v1 + 2 * (y * z + w * x) * v2
    r[:, 2] = 2 * (x * z + w * y) * v0 + 2 * (y * z - w * x) * v1 + (1 - 2 * (x * x + y * y)) * v2
    return r


def generate_measurements(scenario: SimScenario, rng: np.random.Generator) -> ImuDataset:
    """Noisy sensor data for a scenario (gyro, accelerometer, magnetometer).

    Noise is drawn channel by channel (gyro, then accelerometer, then
    magnetometer) through the parameter Cholesky factors, so the output is
    a deterministic function of the generator state.
    """
    params = scenario.params
    n = scenario.time.shape[0]
    noise = params.noise

    e_gyro = rng.standard_normal((n, 3)) @ noise.chol_gyro.T
    e_acc = rng.standard_normal((n, 3)) @ noise.chol_acc.T
    e_mag = rng.standard_normal((n, 3)) @ noise.chol_mag.T

    gyro = scenario.rates + noise.gyro_bias + e_gyro
    acc = -_rotate_into_body(scenario.quaternions, GRAVITY_NAV) + e_acc
    mag_body = _rotate_into_body(scenario.quaternions, params.field.vector)
    mag = mag_body @ params.mag.distortion.T + params.mag.offset + e_mag
    return ImuDataset(scenario.time, gyro, acc, mag)


# face placements as (roll about x, pitch about y) applied before the headings
_PROTOCOL_FACES = (
    ("z_up", (0.0, 0.0)),
    ("z_down", (math.pi, 0.0)),
    ("x_up", (0.0, -0.5 * math.pi)),
    ("x_down", (0.0, 0.5 * math.pi)),
    ("y_down", (-0.5 * math.pi, 0.0)),
    ("y_up", (0.5 * math.pi, 0.0)),
)


def generate_heading_protocol(params: CalibrationParams, rng: np.random.Generator,
                              samples_per_segment: int = 500):
    """Mean sensor readings for the 24-orientation right-angle protocol.

    Six face-up/face-down placements, each rotated through five headings 90
    degrees apart (the fifth returns to the start).  Per stationary segment
    the accelerometer and magnetometer sample means are returned, ready for
    :func:`magcal.evaluate.ninety_degree_table`.
    """
    sequences = []
    for label, (rx, ry) in _PROTOCOL_FACES:
        cx, sx = math.cos(rx), math.sin(rx)
        cy, sy = math.cos(ry), math.sin(ry)
        face = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]]) @ np.array(
            [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]]
        )
        segments = []
        for k in range(5):
            psi = 0.5 * math.pi * k
            cz, sz = math.cos(psi), math.sin(psi)
            R_nb = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]]) @ face
            R_bn = R_nb.T
            acc_true = -(R_bn @ GRAVITY_NAV)
            mag_true = params.mag.distortion @ (R_bn @ params.field.vector) + params.mag.offset
            e_acc = rng.standard_normal((samples_per_segment, 3)) @ params.noise.chol_acc.T
            e_mag = rng.standard_normal((samples_per_segment, 3)) @ params.noise.chol_mag.T
            segments.append((acc_true + e_acc.mean(axis=0), mag_true + e_mag.mean(axis=0)))
        sequences.append((label, segments))
    return sequences


def heading_rmse(q_est: np.ndarray, q_ref: np.ndarray) -> float:
    """RMS heading component of the orientation error, in degrees.

    The error quaternion q_est * conj(q_ref) is converted to Euler angles
    and only the heading is kept; quaternion sign flips have no effect.
    """
    q_est = np.asarray(q_est, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    if q_est.shape != q_ref.shape:
        raise ValueError(f"quaternion arrays differ in shape: {q_est.shape} vs {q_ref.shape}")
    w1, x1, y1, z1 = q_est[:, 0], q_est[:, 1], q_est[:, 2], q_est[:, 3]
    # conjugate of the reference
    w2, x2, y2, z2 = q_ref[:, 0], -q_ref[:, 1], -q_ref[:, 2], -q_ref[:, 3]
    dw = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    dx = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    dy = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    dz = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    heading = np.arctan2(2.0 * (dw * dz + dx * dy), 1.0 - 2.0 * (dy * dy + dz * dz))
    return float(np.degrees(math.sqrt(float(np.mean(heading**2)))))


def run_trial(trial: int, master_seed: int, sim_config: SimConfig | None = None,
              calib_config: CalibrationConfig | None = None,
              transient_discard: int = TRANSIENT_DISCARD) -> McRecord:
    """Simulate, calibrate and score one Monte Carlo trial."""
    if sim_config is None:
        sim_config = SimConfig()
    seed = trial_seed(master_seed, trial)
    rng = np.random.default_rng(seed)
    params_true = sample_true_params(rng, sim_config.dip_deg)
    time, quats, rates = generate_trajectory(sim_config)
    scenario = SimScenario(params=params_true, time=time, quaternions=quats, rates=rates, seed=seed)
    data = generate_measurements(scenario, rng)

    if calib_config is None:
        calib_config = CalibrationConfig()
    if calib_config.stationary_range is None:
        calib_config = replace(calib_config, stationary_range=(0, sim_config.stationary_samples))

    nan = float("nan")
    try:
        # bias draws here routinely dwarf the gyro noise, so the stationarity
        # heuristic (and noisy-optimum stalls) would warn on most trials
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = calibrate(data, calib_config)
    except Exception as exc:  # record the failure, do not bring down the study
        return McRecord(
            trial=trial, seed=seed, status=f"failed: {exc}", params_true=scenario.params,
            params_init=None, params_ml=None, rmse_init_deg=nan, rmse_ml_deg=nan,
            cost_init=nan, cost_ml=nan, iterations=0,
        )

    q_ref = scenario.quaternions[transient_discard:]
    run_init = ekf_run(data, result.initial, calib_config.ekf)
    run_ml = ekf_run(data, result.refined, calib_config.ekf)
    rmse_init = heading_rmse(run_init.quaternions[transient_discard:], q_ref)
    rmse_ml = heading_rmse(run_ml.quaternions[transient_discard:], q_ref)

    return McRecord(
        trial=trial,
        seed=seed,
        status="ok",
        params_true=scenario.params,
        params_init=result.initial,
        params_ml=result.refined,
        rmse_init_deg=rmse_init,
        rmse_ml_deg=rmse_ml,
        cost_init=result.cost_initial,
        cost_ml=result.cost_refined,
        iterations=result.opt_trace.iterations,
    )


def _run_trial_args(args) -> McRecord:
    return run_trial(*args)


def run_monte_carlo(n_trials: int, master_seed: int, sim_config: SimConfig | None = None,
                    calib_config: CalibrationConfig | None = None, workers: int = 1,
                    transient_discard: int = TRANSIENT_DISCARD) -> list[McRecord]:
    """Run the heading-accuracy study; failures are recorded, never dropped."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = [(t, master_seed, sim_config, calib_config, transient_discard) for t in range(n_trials)]
    if workers == 0:
        workers = os.cpu_count() or 1
    if workers > 1 and n_trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_trial_args, jobs))
    else:
        records = [_run_trial_args(j) for j in jobs]
    return records
