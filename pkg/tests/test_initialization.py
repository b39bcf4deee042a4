import numpy as np
import pytest

from magcal.ekf import EkfConfig, ekf_run
from magcal.initialization import (
    DegenerateDataError,
    EllipsoidQuadric,
    InvalidQuadricError,
    build_initial,
    detect_stationary_prefix,
    estimate_misalignment,
    fit_ellipsoid,
    initial_noise_estimates,
    recover_cal,
)
from magcal.models import (
    CalibrationParams,
    ImuDataset,
    LocalField,
    MagCalibration,
    NoiseModel,
    pack_params,
)
from magcal.simulate import sample_true_params
from magcal.so3 import exp_map, quat_to_rotmat


def sphere_points(n, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def ellipsoid_points(D, o, n=500, seed=0):
    return sphere_points(n, seed) @ np.asarray(D).T + np.asarray(o)


def quadric_values(quadric, pts):
    return np.einsum("ni,ij,nj->n", pts, quadric.A, pts) + pts @ quadric.b + quadric.c


def stationary_dataset(gyro, acc=None, mag=None):
    n = gyro.shape[0]
    if acc is None:
        acc = np.tile([0.0, 0.0, 9.81], (n, 1))
    if mag is None:
        mag = np.tile([0.4, 0.0, -0.9], (n, 1))
    return ImuDataset(np.arange(n) * 0.01, gyro, acc, mag)


# --- noise initialization ----------------------------------------------------

def test_noise_estimates_constant_gyro():
    gyro = np.tile([0.01, 0.0, 0.0], (100, 1))
    noise = initial_noise_estimates(stationary_dataset(gyro))
    np.testing.assert_allclose(noise.gyro_bias, [0.01, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(noise.cov_gyro, 0.0, atol=1e-15)


def test_noise_estimates_recover_known_covariance():
    rng = np.random.default_rng(1)
    cov = np.diag([4e-4, 1e-4, 9e-4])
    gyro = rng.multivariate_normal(np.array([0.2, -0.1, 0.05]), cov, size=100)
    acc = rng.multivariate_normal([0.0, 0.0, 9.81], 0.01 * np.eye(3), size=100)
    mag = rng.multivariate_normal([0.4, 0.0, -0.9], 0.005 * np.eye(3), size=100)
    noise = initial_noise_estimates(stationary_dataset(gyro, acc, mag))
    assert np.linalg.norm(noise.cov_gyro - cov) / np.linalg.norm(cov) < 0.20
    for estimate in (noise.cov_gyro, noise.cov_acc, noise.cov_mag):
        assert np.linalg.eigvalsh(estimate).min() >= -1e-12


def test_noise_estimates_too_few_samples():
    with pytest.raises(DegenerateDataError):
        initial_noise_estimates(stationary_dataset(np.zeros((49, 3))))


def test_noise_estimates_warns_on_motion():
    rng = np.random.default_rng(2)
    # steady rotation far above the noise level: user selected moving data
    gyro = np.tile([2.0, 0.0, 0.0], (100, 1)) + 1e-3 * rng.standard_normal((100, 3))
    with pytest.warns(RuntimeWarning, match="motion"):
        initial_noise_estimates(stationary_dataset(gyro))


def test_detect_stationary_prefix():
    gyro = np.zeros((120, 3))
    gyro[80:, 1] = 1.0
    assert detect_stationary_prefix(stationary_dataset(gyro)) == 80
    assert detect_stationary_prefix(stationary_dataset(np.zeros((30, 3)))) == 30


# --- ellipsoid fit -----------------------------------------------------------

def test_fit_unit_sphere():
    quadric = fit_ellipsoid(sphere_points(200))
    np.testing.assert_allclose(quadric.A, np.eye(3) / 3.0, atol=1e-9)
    np.testing.assert_allclose(quadric.b, 0.0, atol=1e-9)
    assert quadric.c == pytest.approx(-1.0 / 3.0, abs=1e-9)
    assert not quadric.pd_projected


def test_fit_shifted_sphere():
    pts = sphere_points(200) + np.array([1.0, 0.0, 0.0])
    quadric = fit_ellipsoid(pts)
    np.testing.assert_allclose(quadric.A, np.eye(3) / 3.0, atol=1e-9)
    np.testing.assert_allclose(quadric.b, [-2.0 / 3.0, 0.0, 0.0], atol=1e-9)
    assert quadric.c == pytest.approx(0.0, abs=1e-9)


def test_fit_table_distortions_residual():
    rng = np.random.default_rng(3)
    for _ in range(5):
        params = sample_true_params(rng)
        pts = ellipsoid_points(params.mag.distortion, params.mag.offset, n=500)
        quadric = fit_ellipsoid(pts)
        residual = np.linalg.norm(quadric_values(quadric, pts)) / np.sqrt(len(pts))
        assert residual < 1e-8


def test_fit_requires_enough_samples():
    with pytest.raises(DegenerateDataError):
        fit_ellipsoid(sphere_points(12))


def test_fit_rejects_planar_data():
    pts = sphere_points(100)
    pts[:, 2] = 0.0
    with pytest.raises(DegenerateDataError, match="rotate the sensor"):
        fit_ellipsoid(pts)


def test_fit_permutation_invariant():
    pts = ellipsoid_points(np.diag([1.2, 0.8, 1.0]), [0.3, -0.2, 0.1], n=300, seed=4)
    quadric1 = fit_ellipsoid(pts)
    quadric2 = fit_ellipsoid(pts[::-1])
    np.testing.assert_allclose(quadric1.A, quadric2.A, atol=1e-9)
    np.testing.assert_allclose(quadric1.b, quadric2.b, atol=1e-9)
    assert quadric1.c == pytest.approx(quadric2.c, abs=1e-9)


# --- calibration recovery ----------------------------------------------------

def test_recover_unit_sphere():
    d_tilde, o0 = recover_cal(EllipsoidQuadric(np.eye(3) / 3.0, np.zeros(3), -1.0 / 3.0))
    np.testing.assert_allclose(d_tilde, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(o0, 0.0, atol=1e-12)


def test_recover_shifted_sphere():
    quadric = EllipsoidQuadric(np.eye(3) / 3.0, np.array([-2.0 / 3.0, 0.0, 0.0]), 0.0)
    d_tilde, o0 = recover_cal(quadric)
    np.testing.assert_allclose(d_tilde, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(o0, [1.0, 0.0, 0.0], atol=1e-12)


def test_recover_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(5):
        params = sample_true_params(rng)
        D, o = params.mag.distortion, params.mag.offset
        pts = ellipsoid_points(D, o, n=500, seed=6)
        d_tilde, o0 = recover_cal(fit_ellipsoid(pts))
        np.testing.assert_allclose(d_tilde @ d_tilde.T, D @ D.T, atol=1e-6)
        np.testing.assert_allclose(o0, o, atol=1e-6)
        # lower triangular with positive diagonal
        np.testing.assert_allclose(np.triu(d_tilde, 1), 0.0, atol=0)
        assert np.diag(d_tilde).min() > 0


def test_recover_rejects_non_enclosing_quadric():
    with pytest.raises(InvalidQuadricError, match="gamma"):
        recover_cal(EllipsoidQuadric(np.eye(3) / 3.0, np.zeros(3), 1.0))
    with pytest.raises(InvalidQuadricError):
        recover_cal(EllipsoidQuadric(np.diag([1.0, 1.0, -1.0]) / 1.0, np.zeros(3), -1.0))


# --- misalignment ------------------------------------------------------------

def inclination_run_for(data, params):
    incl_params = CalibrationParams(MagCalibration.identity(), LocalField(0.0), params.noise)
    return ekf_run(data, incl_params, EkfConfig(use_magnetometer=False))


def test_misalignment_identity_case(noise_free_case):
    scenario, data = noise_free_case
    D, o = scenario.params.mag.distortion, scenario.params.mag.offset
    incl = inclination_run_for(data, scenario.params)
    mis = estimate_misalignment(data, incl, D, o)
    # feeding the true D directly means no rotation is missing
    np.testing.assert_allclose(mis.rotation, np.eye(3), atol=1e-6)
    assert mis.m_z == pytest.approx(scenario.params.field.vertical, abs=1e-7)
    assert mis.residual < 1e-12


def test_misalignment_recovers_known_rotation(noise_free_case):
    scenario, data = noise_free_case
    D, o = scenario.params.mag.distortion, scenario.params.mag.offset
    R = quat_to_rotmat(exp_map([0.15, -0.2, 0.3]))
    incl = inclination_run_for(data, scenario.params)
    mis = estimate_misalignment(data, incl, D @ R.T, o)
    angle_err = np.arccos(np.clip((np.trace(mis.rotation @ R.T) - 1) / 2, -1, 1))
    assert angle_err < 1e-6
    np.testing.assert_allclose(
        mis.rotation @ mis.rotation.T, np.eye(3), atol=1e-10
    )
    assert abs(np.linalg.det(mis.rotation) - 1.0) < 1e-10


def test_misalignment_descends(noise_free_case):
    scenario, data = noise_free_case
    D, o = scenario.params.mag.distortion, scenario.params.mag.offset
    incl = inclination_run_for(data, scenario.params)
    d_tilde = D @ quat_to_rotmat(exp_map([0.0, 0.0, 0.4])).T
    # objective at the initialization point (R = I, m_z at its conditional optimum)
    zs = np.linalg.solve(d_tilde, (data.mag - o).T).T
    quats = incl.quaternions
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    vert = np.column_stack(
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]
    )
    inner = np.einsum("ni,ni->n", vert, zs)
    r0 = inner.mean() - inner
    cost0 = 0.5 * float(r0 @ r0)
    mis = estimate_misalignment(data, incl, d_tilde, o)
    assert mis.residual <= cost0


# --- assembled initial estimate ----------------------------------------------

def test_build_initial_identity():
    from magcal.initialization import MisalignmentEstimate

    mis = MisalignmentEstimate(np.eye(3), -0.92, 0.0, True, 1)
    init = build_initial(np.eye(3), np.zeros(3), mis, NoiseModel.zero())
    np.testing.assert_allclose(init.params.mag.distortion, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(init.params.field.vector, [0.3919183588453085, 0.0, -0.92],
                               atol=1e-12)
    assert pack_params(init.params).shape == (34,)
    np.testing.assert_allclose(
        init.params.mag.distortion, init.d_tilde @ init.r_mis, atol=1e-12
    )


def test_end_to_end_initialization_noise_free(noise_free_case):
    scenario, data = noise_free_case
    params = scenario.params
    quadric = fit_ellipsoid(data.mag)
    d_tilde, o0 = recover_cal(quadric)
    incl = inclination_run_for(data, params)
    mis = estimate_misalignment(data, incl, d_tilde, o0)
    init = build_initial(d_tilde, o0, mis, params.noise, quadric.pd_projected)
    np.testing.assert_allclose(init.params.mag.distortion, params.mag.distortion, atol=1e-5)
    np.testing.assert_allclose(init.params.mag.offset, params.mag.offset, atol=1e-5)
    np.testing.assert_allclose(
        init.params.mag.distortion, init.d_tilde @ init.r_mis, atol=1e-12
    )
