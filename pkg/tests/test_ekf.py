import math

import numpy as np
import pytest
from conftest import make_noise_free_case, zero_noise

from magcal.ekf import EkfConfig, EkfNumericalError, ekf_run, initial_orientation, nll_cost
from magcal.models import (
    CalibrationParams,
    ImuDataset,
    LocalField,
    MagCalibration,
    NoiseModel,
    model_accel,
    model_mag,
)
from magcal.simulate import SimConfig, SimScenario, generate_measurements, heading_rmse
from magcal.so3 import euler_to_quat, quat_to_rotmat


def stationary_case(params, q0, n=200, rng=None):
    """Dataset at a fixed true orientation q0 (noise only if params carry it)."""
    quats = np.tile(q0, (n, 1))
    rates = np.zeros((n, 3))
    time = np.arange(n) * 0.01
    scenario = SimScenario(params, time, quats, rates, 0)
    return generate_measurements(scenario, rng or np.random.default_rng(0))


def test_noise_free_tracking(noise_free_case):
    scenario, data = noise_free_case
    run = ekf_run(data, scenario.params)
    assert heading_rmse(run.quaternions[50:], scenario.quaternions[50:]) < 0.01


def test_stationary_predictions_constant():
    # heading 0 so the accel-levelled initial orientation is the fixed point
    q0 = euler_to_quat(0.2, -0.3, 0.0)
    params = CalibrationParams(MagCalibration.identity(), LocalField(1.1), NoiseModel.zero())
    data = stationary_case(params, q0)
    run = ekf_run(data, params)
    R_bn = quat_to_rotmat(q0).T
    expected = np.concatenate([model_accel(R_bn), model_mag(R_bn, params.mag, params.field)])
    for t in range(1, len(data)):
        np.testing.assert_allclose(run.y_pred[t], expected, atol=1e-9)


def test_gyro_bias_cancels():
    sim = SimConfig()
    scenario, _ = make_noise_free_case(7, sim)
    params_nobias = zero_noise(scenario.params, keep_bias=False)
    scn_nobias = SimScenario(params_nobias, scenario.time, scenario.quaternions, scenario.rates, 7)
    data_nobias = generate_measurements(scn_nobias, np.random.default_rng(1))

    bias = np.array([0.1, 0.0, 0.0])
    params_bias = CalibrationParams(
        params_nobias.mag, params_nobias.field,
        NoiseModel(bias, np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3))),
    )
    data_bias = ImuDataset(data_nobias.time, data_nobias.gyro + bias, data_nobias.acc, data_nobias.mag)

    run_a = ekf_run(data_nobias, params_nobias)
    run_b = ekf_run(data_bias, params_bias)
    np.testing.assert_allclose(run_b.quaternions, run_a.quaternions, atol=1e-9)
    assert run_b.neg_log_lik == pytest.approx(run_a.neg_log_lik, rel=1e-9)


def test_innovation_whiteness():
    # long run simulated at the same parameters the filter uses
    sim = SimConfig(samples_per_axis=1000)
    rng = np.random.default_rng(42)
    from magcal.simulate import sample_true_params, generate_trajectory

    params = sample_true_params(rng, sim.dip_deg)
    time, quats, rates = generate_trajectory(sim)
    data = generate_measurements(SimScenario(params, time, quats, rates, 42), rng)
    assert len(data) >= 3000
    run = ekf_run(data, params)
    from magcal.evaluate import residual_stats

    stats = residual_stats(run, data)
    assert -0.05 <= stats.mean <= 0.05
    assert 0.9 <= stats.std <= 1.1


def test_quaternions_stay_normalized(noisy_case):
    scenario, data = noisy_case
    run = ekf_run(data, scenario.params)
    np.testing.assert_allclose(np.linalg.norm(run.quaternions, axis=1), 1.0, atol=1e-9)


def test_innovation_covariances_positive_definite(noisy_case):
    scenario, data = noisy_case
    run = ekf_run(data, scenario.params)
    for t in range(0, len(data), 7):
        S = run.innov_cov[t]
        np.testing.assert_allclose(S, S.T, atol=1e-12)
        assert np.linalg.eigvalsh(S).min() > 0


def test_magnetometer_disabled_matches_inclination(noise_free_case):
    scenario, data = noise_free_case
    full = ekf_run(data, scenario.params)
    incl = ekf_run(data, scenario.params, EkfConfig(use_magnetometer=False))
    assert incl.y_pred.shape == (len(data), 3)
    assert incl.innov_cov.shape == (len(data), 3, 3)
    # vertical direction in the body frame agrees between the two runs
    for t in range(0, len(data), 13):
        v_full = quat_to_rotmat(full.quaternions[t]).T[:, 2]
        v_incl = quat_to_rotmat(incl.quaternions[t]).T[:, 2]
        assert np.linalg.norm(v_full - v_incl) < 1e-8


def test_nll_recomputable_from_stored_quantities(noisy_case):
    scenario, data = noisy_case
    run = ekf_run(data, scenario.params)
    meas = np.hstack([data.acc, data.mag])
    total = 0.0
    for t in range(len(data)):
        S = run.innov_cov[t]
        nu = meas[t] - run.y_pred[t]
        L = np.linalg.cholesky(S)
        z = np.linalg.solve(L, nu)
        total += 0.5 * (z @ z + 2.0 * np.log(np.diag(L)).sum())
    assert total == pytest.approx(run.neg_log_lik, rel=1e-9)


def test_cost_prefers_true_parameters(noisy_case):
    scenario, data = noisy_case
    p = scenario.params
    scaled = CalibrationParams(
        MagCalibration(1.5 * p.mag.distortion, p.mag.offset), p.field, p.noise
    )
    assert nll_cost(data, p) < nll_cost(data, scaled)


def test_cost_invariant_to_time_offset(noisy_case):
    scenario, data = noisy_case
    shifted = ImuDataset(data.time + 10.0, data.gyro, data.acc, data.mag)
    c0 = nll_cost(data, scenario.params)
    c1 = nll_cost(shifted, scenario.params)
    assert c1 == pytest.approx(c0, rel=1e-9)


def test_non_finite_measurement_raises(noisy_case):
    scenario, data = noisy_case
    acc = data.acc.copy()
    acc[37, 1] = np.nan
    broken = ImuDataset(data.time, data.gyro, acc, data.mag)
    with pytest.raises(EkfNumericalError) as excinfo:
        ekf_run(broken, scenario.params)
    assert excinfo.value.step == 37
    assert nll_cost(broken, scenario.params) == math.inf


def test_deterministic(noisy_case):
    scenario, data = noisy_case
    a = ekf_run(data, scenario.params)
    b = ekf_run(data, scenario.params)
    assert a.neg_log_lik == b.neg_log_lik
    np.testing.assert_array_equal(a.quaternions, b.quaternions)
    np.testing.assert_array_equal(a.innov_cov, b.innov_cov)


def test_initial_orientation_levels_roll_pitch():
    rng = np.random.default_rng(11)
    for _ in range(50):
        roll, pitch = rng.uniform(-1.2, 1.2, 2)
        q = euler_to_quat(roll, pitch, rng.uniform(-math.pi, math.pi))
        acc = model_accel(quat_to_rotmat(q).T)
        q0 = initial_orientation(acc)
        from magcal.so3 import quat_to_euler

        r, p, h = quat_to_euler(q0)
        assert r == pytest.approx(roll, abs=1e-9)
        assert p == pytest.approx(pitch, abs=1e-9)
        assert abs(h) < 1e-12
