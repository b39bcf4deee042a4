"""Multiplicative EKF over a 3-dim orientation deviation, and the ML cost.

The filter state is a small rotation vector eta attached to the current
quaternion estimate by right multiplication, ``q = q_hat * exp_map(eta)``,
and is reset to zero after every measurement update (the deviation is
folded into the quaternion).  The gyroscope drives the time update as an
input; the accelerometer and (optionally) the magnetometer form one joint
measurement update whose predicted value and innovation covariance are the
one-step-ahead predictor used by the likelihood.

The gyro sample at index t propagates the orientation from sample t-1 to
sample t, i.e. it is treated as the mean rate over the interval ending at
its own timestamp.

The per-step recursion is compiled with numba: the likelihood refinement
evaluates this filter tens of thousands of times, so the inner loop works
on plain float64 arrays with hand-rolled small-matrix factorizations and
reports failures through an error code instead of exceptions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .models import GRAVITY_NAV, CalibrationParams, ImuDataset
from .so3 import euler_to_quat


class EkfNumericalError(RuntimeError):
    """Numerical failure inside the filter, carrying the offending step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def _default_initial_cov() -> np.ndarray:
    five_deg = math.radians(5.0)
    sixty_deg = math.radians(60.0)
    return np.diag([five_deg**2, five_deg**2, sixty_deg**2])


@dataclass(frozen=True, eq=False)
class EkfConfig:
    """Filter options; defaults match the calibration pipeline.

    initial_orientation_cov is the prior on the orientation deviation
    (rad^2): roll/pitch are known to a few degrees from the first
    accelerometer sample, heading is nearly unknown before magnetometer
    updates.
    """

    use_magnetometer: bool = True
    initial_orientation_cov: np.ndarray = field(default_factory=_default_initial_cov)
    regularization_floor: float = 1e-12


@dataclass(frozen=True, eq=False)
class EkfRun:
    """One-step-ahead predictions, innovation covariances and filtered quaternions."""

    y_pred: np.ndarray  # (N, m) predicted measurements, m = 6 or 3
    innov_cov: np.ndarray  # (N, m, m) innovation covariances
    quaternions: np.ndarray  # (N, 4) filtered q_nb after each update
    neg_log_lik: float
    regularization_count: int = 0

    @property
    def measurement_dim(self) -> int:
        return self.y_pred.shape[1]


def initial_orientation(acc0: np.ndarray) -> np.ndarray:
    """Level quaternion from one accelerometer sample: roll/pitch only, heading 0."""
    a0, a1, a2 = float(acc0[0]), float(acc0[1]), float(acc0[2])
    norm = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    if norm < 1e-6:
        return np.array([1.0, 0.0, 0.0, 0.0])
    up = (a0 / norm, a1 / norm, a2 / norm)
    pitch = -math.asin(max(-1.0, min(1.0, up[0])))
    roll = math.atan2(up[1], up[2])
    return euler_to_quat(roll, pitch, 0.0)


_ERR_NONFINITE_MEAS = 1
_ERR_NOT_PD = 2
_ERR_NONFINITE_COST = 3

# gravity components are compile-time constants of the kernel
GRAV0, GRAV1, GRAV2 = GRAVITY_NAV

_ERR_MESSAGES = {
    _ERR_NONFINITE_MEAS: "non-finite measurement",
    _ERR_NOT_PD: "innovation covariance not positive definite",
    _ERR_NONFINITE_COST: "non-finite cost contribution",
}


@njit(cache=True)
def _quat_mult(q1, q2, out):
    w1, x1, y1, z1 = q1[0], q1[1], q1[2], q1[3]
    w2, x2, y2, z2 = q2[0], q2[1], q2[2], q2[3]
    w = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    x = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    y = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    z = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    inv = 1.0 / math.sqrt(w * w + x * x + y * y + z * z)
    out[0] = w * inv
    out[1] = x * inv
    out[2] = y * inv
    out[3] = z * inv


@njit(cache=True)
def _exp_map(e0, e1, e2, out):
    angle_sq = e0 * e0 + e1 * e1 + e2 * e2
    angle = math.sqrt(angle_sq)
    if angle < 1e-8:
        w = 1.0 - angle_sq / 8.0
        k = 0.5 - angle_sq / 48.0
    else:
        w = math.cos(0.5 * angle)
        k = math.sin(0.5 * angle) / angle
    out[0] = w
    out[1] = k * e0
    out[2] = k * e1
    out[3] = k * e2


@njit(cache=True)
def _rotmat(q, R):
    w, x, y, z = q[0], q[1], q[2], q[3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    R[0, 0] = 1.0 - 2.0 * (yy + zz)
    R[0, 1] = 2.0 * (xy - wz)
    R[0, 2] = 2.0 * (xz + wy)
    R[1, 0] = 2.0 * (xy + wz)
    R[1, 1] = 1.0 - 2.0 * (xx + zz)
    R[1, 2] = 2.0 * (yz - wx)
    R[2, 0] = 2.0 * (xz - wy)
    R[2, 1] = 2.0 * (yz + wx)
    R[2, 2] = 1.0 - 2.0 * (xx + yy)


@njit(cache=True)
def _cholesky(S, L, m):
    """In-place lower Cholesky of the leading m x m block; True on success."""
    for i in range(m):
        for j in range(i + 1):
            acc = S[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0 or not math.isfinite(acc):
                    return False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return True


@njit(cache=True)
def _ekf_kernel(time, gyro, acc, mag, D, offset, m_nav, bias, cov_gyro, R_meas,
                use_mag, P0, q0, floor, y_pred, S_all, quats):
    n = time.shape[0]
    m = 6 if use_mag else 3

    q = np.empty(4)
    q_tmp = np.empty(4)
    dq = np.empty(4)
    for i in range(4):
        q[i] = q0[i]
    P = P0.copy()
    Pp = np.empty((3, 3))
    F = np.empty((3, 3))
    R_nb = np.empty((3, 3))
    H = np.zeros((m, 3))
    yhat = np.empty(m)
    nu = np.empty(m)
    S = np.empty((m, m))
    L = np.zeros((m, m))
    PHt = np.empty((3, m))
    X = np.empty((m, 4))  # columns: S^-1 nu | S^-1 (H P)
    K = np.empty((3, m))
    eta = np.empty(3)
    IKH = np.empty((3, 3))
    T3 = np.empty((3, 3))
    KR = np.empty((3, m))

    g0, g1, g2 = GRAV0, GRAV1, GRAV2
    nll = 0.0
    reg_count = 0

    for t in range(n):
        if t > 0:
            dt = time[t] - time[t - 1]
            _exp_map((gyro[t, 0] - bias[0]) * dt, (gyro[t, 1] - bias[1]) * dt,
                     (gyro[t, 2] - bias[2]) * dt, dq)
            _quat_mult(q, dq, q_tmp)
            for i in range(4):
                q[i] = q_tmp[i]
            # deviation propagates through the transpose of the increment
            _rotmat(dq, R_nb)
            dt2 = dt * dt
            for i in range(3):
                for j in range(3):
                    acc_ = 0.0
                    for k in range(3):
                        for l in range(3):
                            acc_ += R_nb[k, i] * P[k, l] * R_nb[l, j]
                    Pp[i, j] = acc_ + dt2 * cov_gyro[i, j]
            for i in range(3):
                for j in range(3):
                    P[i, j] = Pp[i, j]

        _rotmat(q, R_nb)
        # v_a = R_bn g, v_m = R_bn m (R_bn = R_nb^T)
        va0 = R_nb[0, 0] * g0 + R_nb[1, 0] * g1 + R_nb[2, 0] * g2
        va1 = R_nb[0, 1] * g0 + R_nb[1, 1] * g1 + R_nb[2, 1] * g2
        va2 = R_nb[0, 2] * g0 + R_nb[1, 2] * g1 + R_nb[2, 2] * g2
        yhat[0] = -va0
        yhat[1] = -va1
        yhat[2] = -va2
        # H_a = -[v_a]x
        H[0, 1] = va2
        H[0, 2] = -va1
        H[1, 0] = -va2
        H[1, 2] = va0
        H[2, 0] = va1
        H[2, 1] = -va0
        nu[0] = acc[t, 0] - yhat[0]
        nu[1] = acc[t, 1] - yhat[1]
        nu[2] = acc[t, 2] - yhat[2]
        if use_mag:
            vm0 = R_nb[0, 0] * m_nav[0] + R_nb[1, 0] * m_nav[1] + R_nb[2, 0] * m_nav[2]
            vm1 = R_nb[0, 1] * m_nav[0] + R_nb[1, 1] * m_nav[1] + R_nb[2, 1] * m_nav[2]
            vm2 = R_nb[0, 2] * m_nav[0] + R_nb[1, 2] * m_nav[1] + R_nb[2, 2] * m_nav[2]
            for i in range(3):
                yhat[3 + i] = D[i, 0] * vm0 + D[i, 1] * vm1 + D[i, 2] * vm2 + offset[i]
                # H_m = D [v_m]x
                H[3 + i, 0] = D[i, 1] * vm2 - D[i, 2] * vm1
                H[3 + i, 1] = D[i, 2] * vm0 - D[i, 0] * vm2
                H[3 + i, 2] = D[i, 0] * vm1 - D[i, 1] * vm0
                nu[3 + i] = mag[t, i] - yhat[3 + i]

        for i in range(m):
            if not math.isfinite(nu[i]):
                return nll, reg_count, t, _ERR_NONFINITE_MEAS

        # S = H P H^T + R
        for i in range(3):
            for j in range(m):
                PHt[i, j] = P[i, 0] * H[j, 0] + P[i, 1] * H[j, 1] + P[i, 2] * H[j, 2]
        for i in range(m):
            for j in range(m):
                S[i, j] = H[i, 0] * PHt[0, j] + H[i, 1] * PHt[1, j] + H[i, 2] * PHt[2, j] \
                    + R_meas[i, j]

        if not _cholesky(S, L, m):
            tr = 0.0
            for i in range(m):
                tr += S[i, i]
            bump = floor * tr / m
            for i in range(m):
                S[i, i] += bump
            reg_count += 1
            if not _cholesky(S, L, m):
                return nll, reg_count, t, _ERR_NOT_PD

        # X = S^-1 [nu | (H P)] via forward/back substitution
        for i in range(m):
            X[i, 0] = nu[i]
            X[i, 1] = PHt[0, i]
            X[i, 2] = PHt[1, i]
            X[i, 3] = PHt[2, i]
        for col in range(4):
            for i in range(m):
                acc_ = X[i, col]
                for k in range(i):
                    acc_ -= L[i, k] * X[k, col]
                X[i, col] = acc_ / L[i, i]
            for i in range(m - 1, -1, -1):
                acc_ = X[i, col]
                for k in range(i + 1, m):
                    acc_ -= L[k, i] * X[k, col]
                X[i, col] = acc_ / L[i, i]

        mahal = 0.0
        logdet = 0.0
        for i in range(m):
            mahal += nu[i] * X[i, 0]
            logdet += math.log(L[i, i])
        step_cost = 0.5 * mahal + logdet
        if not math.isfinite(step_cost):
            return nll, reg_count, t, _ERR_NONFINITE_COST
        nll += step_cost

        # K = P H^T S^-1 = X[:, 1:4]^T
        for i in range(3):
            for j in range(m):
                K[i, j] = X[j, 1 + i]
        for i in range(3):
            eta[i] = 0.0
            for j in range(m):
                eta[i] += K[i, j] * nu[j]

        # Joseph-form covariance update
        for i in range(3):
            for j in range(3):
                acc_ = 1.0 if i == j else 0.0
                for k in range(m):
                    acc_ -= K[i, k] * H[k, j]
                IKH[i, j] = acc_
        for i in range(3):
            for j in range(3):
                T3[i, j] = IKH[i, 0] * P[0, j] + IKH[i, 1] * P[1, j] + IKH[i, 2] * P[2, j]
        for i in range(3):
            for j in range(3):
                P[i, j] = T3[i, 0] * IKH[j, 0] + T3[i, 1] * IKH[j, 1] + T3[i, 2] * IKH[j, 2]
        for i in range(3):
            for j in range(m):
                acc_ = 0.0
                for k in range(m):
                    acc_ += K[i, k] * R_meas[k, j]
                KR[i, j] = acc_
        for i in range(3):
            for j in range(3):
                acc_ = 0.0
                for k in range(m):
                    acc_ += KR[i, k] * K[j, k]
                P[i, j] += acc_
        for i in range(3):
            for j in range(i):
                sym = 0.5 * (P[i, j] + P[j, i])
                P[i, j] = sym
                P[j, i] = sym

        _exp_map(eta[0], eta[1], eta[2], dq)
        _quat_mult(q, dq, q_tmp)
        for i in range(4):
            q[i] = q_tmp[i]

        for i in range(m):
            y_pred[t, i] = yhat[i]
            for j in range(m):
                S_all[t, i, j] = S[i, j]
        for i in range(4):
            quats[t, i] = q[i]

    return nll, reg_count, -1, 0


def ekf_run(data: ImuDataset, params: CalibrationParams, config: EkfConfig | None = None) -> EkfRun:
    """Run the filter over a dataset for fixed parameters.

    Pure function of its inputs: identical arguments give bit-identical
    results, so multiple runs may execute concurrently on shared data.
    """
    if config is None:
        config = EkfConfig()
    n = len(data)
    use_mag = config.use_magnetometer
    m = 6 if use_mag else 3

    floor = config.regularization_floor
    eye3 = np.eye(3)
    # Cholesky-reconstructed covariances may have zero diagonals during
    # optimization; the floor keeps every factorization well-posed.
    cov_gyro = params.noise.cov_gyro + floor * eye3
    R_meas = np.zeros((m, m))
    R_meas[:3, :3] = params.noise.cov_acc + floor * eye3
    if use_mag:
        R_meas[3:, 3:] = params.noise.cov_mag + floor * eye3

    y_pred = np.empty((n, m))
    innov_cov = np.empty((n, m, m))
    quats = np.empty((n, 4))

    nll, reg_count, err_step, err_code = _ekf_kernel(
        data.time, data.gyro, data.acc, data.mag,
        params.mag.distortion, params.mag.offset, params.field.vector,
        params.noise.gyro_bias, cov_gyro, R_meas, use_mag,
        np.array(config.initial_orientation_cov, dtype=float),
        initial_orientation(data.acc[0]), floor,
        y_pred, innov_cov, quats,
    )
    if err_step >= 0:
        raise EkfNumericalError(err_step, _ERR_MESSAGES[err_code])
    return EkfRun(y_pred, innov_cov, quats, float(nll), int(reg_count))


def nll_cost(data: ImuDataset, params: CalibrationParams, config: EkfConfig | None = None) -> float:
    """Negative log-likelihood of the one-step-ahead predictor.

    Numerical failures inside the filter map to +inf so a line search can
    reject the parameter point; data errors propagate.
    """
    try:
        return ekf_run(data, params, config).neg_log_lik
    except EkfNumericalError:
        return math.inf
