"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  Everything is seeded and deterministic; the Monte
Carlo study used by criteria 3 and 7 is shared through a module fixture.
"""

import hashlib

import numpy as np
import pytest
from conftest import make_noise_free_case, make_noisy_case

from magcal.calibration import CalibrationConfig, calibrate, _cost_of_vector
from magcal.cli import cli_main
from magcal.ekf import EkfConfig, ekf_run
from magcal.evaluate import ninety_degree_table, norm_profile, residual_stats, triad
from magcal.initialization import (
    estimate_misalignment,
    fit_ellipsoid,
    initial_noise_estimates,
    recover_cal,
)
from magcal.models import (
    CalibrationParams,
    LocalField,
    MagCalibration,
    NoiseModel,
    pack_params,
    unpack_params,
)
from magcal.optimize import OptimizerConfig, numerical_gradient
from magcal.simulate import (
    SimConfig,
    SimScenario,
    generate_heading_protocol,
    generate_measurements,
    generate_trajectory,
    run_monte_carlo,
    sample_true_params,
    trial_seed,
)
from magcal.so3 import exp_map, quat_to_rotmat

STATIONARY = CalibrationConfig(stationary_range=(0, 100))

N_NOISE_FREE = 20
N_MC_TRIALS = 25
MC_SEED = 42


def announce(criterion, text):
    print(f"\n[acceptance] criterion {criterion}: PASS - {text}")


def quiet_scenario(seed, sim_config=None):
    """Table-II distortions/bias with realistic (1e-3 variance) sensor noise."""
    if sim_config is None:
        sim_config = SimConfig()
    rng = np.random.default_rng(seed)
    sampled = sample_true_params(rng, sim_config.dip_deg)
    floor = 1e-3 * np.eye(3)
    params = CalibrationParams(
        sampled.mag, sampled.field,
        NoiseModel.from_covariances(sampled.noise.gyro_bias, floor, floor, floor),
    )
    time, quats, rates = generate_trajectory(sim_config)
    scenario = SimScenario(params, time, quats, rates, seed)
    return scenario, generate_measurements(scenario, rng)


@pytest.fixture(scope="module")
def mc_records():
    return run_monte_carlo(N_MC_TRIALS, MC_SEED, workers=2)


def test_criterion_1_noise_free_identifiability():
    worst_d = worst_o = worst_mz = 0.0
    for trial in range(N_NOISE_FREE):
        scenario, data = make_noise_free_case(trial_seed(1000, trial))
        result = calibrate(data, STATIONARY)
        truth = scenario.params
        worst_d = max(worst_d, np.abs(result.refined.mag.distortion - truth.mag.distortion).max())
        worst_o = max(worst_o, np.abs(result.refined.mag.offset - truth.mag.offset).max())
        worst_mz = max(worst_mz, abs(result.refined.field.vertical - truth.field.vertical))
    assert worst_d < 1e-4
    assert worst_o < 1e-4
    assert worst_mz < 1e-5
    announce(1, f"{N_NOISE_FREE} noise-free scenarios recovered "
                f"(max D err {worst_d:.2e}, o err {worst_o:.2e}, m_z err {worst_mz:.2e})")


def test_criterion_2_initialization_round_trip():
    rng = np.random.default_rng(2)
    params = sample_true_params(rng)
    D, o = params.mag.distortion, params.mag.offset
    directions = rng.standard_normal((500, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions @ D.T + o
    d_tilde, o0 = recover_cal(fit_ellipsoid(points))
    ddt_err = np.abs(d_tilde @ d_tilde.T - D @ D.T).max()
    o_err = np.abs(o0 - o).max()
    assert ddt_err < 1e-6
    assert o_err < 1e-6

    # the misalignment step resolves the rotation ambiguity on full IMU data
    scenario, data = make_noise_free_case(trial_seed(2000, 0))
    truth = scenario.params
    quadric = fit_ellipsoid(data.mag)
    dt2, o2 = recover_cal(quadric)
    noise0 = initial_noise_estimates(data.slice(0, 100))
    incl = ekf_run(
        data,
        CalibrationParams(MagCalibration.identity(), LocalField(0.0), noise0),
        EkfConfig(use_magnetometer=False),
    )
    mis = estimate_misalignment(data, incl, dt2, o2)
    d_err = np.abs(dt2 @ mis.rotation - truth.mag.distortion).max()
    assert d_err < 1e-5
    announce(2, f"ellipsoid round trip (DDt err {ddt_err:.2e}, o err {o_err:.2e}), "
                f"misalignment resolves D to {d_err:.2e}")


def test_criterion_3_monte_carlo_heading(mc_records):
    ok = [r for r in mc_records if r.status == "ok"]
    assert len(ok) >= 1
    rmse_init = np.array([r.rmse_init_deg for r in ok])
    rmse_ml = np.array([r.rmse_ml_deg for r in ok])
    improved = float((rmse_ml <= rmse_init).mean())
    assert improved >= 0.80
    assert np.median(rmse_ml) < np.median(rmse_init)
    announce(3, f"{len(ok)}/{N_MC_TRIALS} trials ok, ML <= init in {improved:.0%}, "
                f"median init {np.median(rmse_init):.2f} deg vs ML {np.median(rmse_ml):.2f} deg")


def test_criterion_4_residual_normality():
    scenario, data = make_noisy_case(trial_seed(4000, 0))
    result = calibrate(data, STATIONARY)
    refined = result.refined
    long_cfg = SimConfig(samples_per_axis=1000)
    time, quats, rates = generate_trajectory(long_cfg)
    assert len(time) >= 3000
    held_out = generate_measurements(
        SimScenario(refined, time, quats, rates, 401), np.random.default_rng(401)
    )
    run = ekf_run(held_out, refined)
    stats = residual_stats(run, held_out)
    assert stats.count >= 18000
    assert -0.05 <= stats.mean <= 0.05
    assert 0.9 <= stats.std <= 1.1
    announce(4, f"{stats.count} pooled residuals, mean {stats.mean:+.4f}, std {stats.std:.4f}")


def test_criterion_5_norm_restoration():
    scenario, data = quiet_scenario(trial_seed(5000, 0))
    result = calibrate(data, STATIONARY)
    norms_after = norm_profile(data, result.refined.mag)
    norms_before = np.linalg.norm(data.mag, axis=1)
    spread = norms_before.max() - norms_before.min()
    assert 0.99 <= norms_after.mean() <= 1.01
    assert spread > 0.5
    announce(5, f"calibrated norm mean {norms_after.mean():.4f}, raw spread {spread:.2f}")


def test_criterion_6_ninety_degree_table():
    sim_config = SimConfig(samples_per_axis=300)
    scenario, data = quiet_scenario(trial_seed(6000, 0), sim_config)
    result = calibrate(data, CalibrationConfig(stationary_range=(0, 100)))
    protocol = generate_heading_protocol(scenario.params, np.random.default_rng(601))
    table_ml = ninety_degree_table(protocol, result.refined.mag, result.refined.field)
    table_init = ninety_degree_table(protocol, result.initial.mag, result.initial.field)
    assert table_ml.mean_abs <= table_init.mean_abs
    assert table_ml.mean_abs < 1.3
    announce(6, f"mean |deviation| ML {table_ml.mean_abs:.3f} deg "
                f"vs init {table_init.mean_abs:.3f} deg")


def test_criterion_7_optimizer_contracts(mc_records):
    ok = [r for r in mc_records if r.status == "ok"]
    for record in ok:
        assert record.cost_ml <= record.cost_init

    # accepted-iteration costs are non-increasing on fresh calibrations
    for trial in range(3):
        _, data = make_noisy_case(trial_seed(7000, trial))
        result = calibrate(data, STATIONARY)
        costs = np.array([result.cost_initial] + list(result.opt_trace.costs))
        assert (np.diff(costs) <= 1e-12).all()

    # central differences with h and h/2 agree at the initial estimate
    worst = 0.0
    for trial in range(5):
        _, data = make_noisy_case(trial_seed(7100, trial))
        result = calibrate(data, STATIONARY)
        theta0 = pack_params(result.initial)
        cost = lambda v: _cost_of_vector(data, v, STATIONARY.ekf)
        g_h = numerical_gradient(cost, theta0, OptimizerConfig(grad_step_relative=1e-6))
        g_h2 = numerical_gradient(cost, theta0, OptimizerConfig(grad_step_relative=5e-7))
        mask = np.abs(g_h) > 1e-6
        rel = np.abs(g_h - g_h2)[mask] / np.abs(g_h)[mask]
        worst = max(worst, float(rel.max()))
        assert (rel <= 0.01).all()
    announce(7, f"costs non-increasing on all trials; gradient two-step agreement "
                f"worst {worst:.2e}")


def test_criterion_8_codec_and_structure():
    rng = np.random.default_rng(8)
    for _ in range(100):
        vec = rng.standard_normal(34)
        vec[:9] = np.eye(3).ravel() + 0.2 * rng.standard_normal(9)
        params = unpack_params(vec)
        round_tripped = pack_params(unpack_params(pack_params(params)))
        np.testing.assert_array_equal(round_tripped, pack_params(params))
        for cov in (params.noise.cov_gyro, params.noise.cov_acc, params.noise.cov_mag):
            assert np.linalg.eigvalsh(cov).min() >= -1e-12
    assert pack_params(CalibrationParams.identity()).shape == (34,)

    for _ in range(1000):
        R = quat_to_rotmat(exp_map(rng.uniform(-3, 3, 3)))
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-10
    field = LocalField(1.1)
    for _ in range(100):
        R_nb = quat_to_rotmat(exp_map(rng.uniform(-2, 2, 3)))
        acc = -(R_nb.T @ np.array([0.0, 0.0, -9.81]))
        mag = R_nb.T @ field.vector
        T = triad(acc, mag, m_nav=field.vector)
        assert np.abs(T @ T.T - np.eye(3)).max() < 1e-10
    announce(8, "codec round-trips bit-exactly; covariances PSD; rotations orthonormal")


def test_criterion_9_simulate_determinism(tmp_path):
    digests = []
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / f"{name}.csv"
        code = cli_main(["simulate", "--trials", "5", "--seed", "42",
                         "--threads", str(threads), "--out", str(out)])
        assert code == 0
        digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
    assert digests[0] == digests[1] == digests[2]
    announce(9, "simulate --trials 5 --seed 42 byte-identical across runs and thread counts")
