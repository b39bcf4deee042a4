"""Initial parameter estimation: noise statistics, ellipsoid fit, misalignment.

The ellipsoid fit solves the trace-constrained least-squares problem

    min || M [vec(A); b; c] ||^2   s.t.  tr(A) = 1,  A symmetric,

by eliminating A33 through the trace constraint and solving the reduced
9-unknown system with an orthogonal factorization.  If the minimizer is
not positive definite (possible for poorly excited data), A is projected
onto the PD cone by eigenvalue clipping, rescaled to unit trace, and b, c
are re-solved with A fixed.

Recovery of the calibration from the quadric uses

    o0 = -1/2 A^-1 b,   gamma = 1/4 b^T A^-1 b - c,   Dt Dt^T = gamma A^-1,

with Dt the lower Cholesky factor; points on the unit sphere then map to
the identity calibration.  Dt is unique only up to a right rotation, which
the misalignment step pins down by requiring the inner product between the
calibrated field direction and the vertical (from an inclination-only
filter run) to be constant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .ekf import EkfRun
from .models import (
    CalibrationParams,
    ImuDataset,
    MagCalibration,
    NoiseModel,
    field_from_vertical,
)
from .so3 import exp_map, quat_to_rotmat

MIN_STATIONARY_SAMPLES = 50
MIN_ELLIPSOID_SAMPLES = 13

# Auto-detection of the stationary prefix accepts gyro norms below this (rad/s).
STATIONARY_GYRO_LIMIT = 0.02


class DegenerateDataError(ValueError):
    """Data cannot support the requested estimate (too few samples, no 3D span)."""


class InvalidQuadricError(ValueError):
    """Fitted quadric is not an ellipsoid enclosing the data."""


@dataclass(frozen=True, eq=False)
class EllipsoidQuadric:
    """Quadric coefficients with tr(A) = 1: y^T A y + b^T y + c ~ 0."""

    A: np.ndarray
    b: np.ndarray
    c: float
    pd_projected: bool = False


@dataclass(frozen=True, eq=False)
class MisalignmentEstimate:
    """Rotation aligning magnetometer axes to the inertial axes, plus the field vertical."""

    rotation: np.ndarray  # (3,3) in SO(3)
    m_z: float
    residual: float  # final value of the Gauss-Newton objective
    converged: bool
    iterations: int


@dataclass(frozen=True, eq=False)
class InitialEstimate:
    """Assembled starting point for the ML refinement, with diagnostics."""

    params: CalibrationParams
    d_tilde: np.ndarray  # lower-triangular factor from the ellipsoid fit
    r_mis: np.ndarray  # rotation resolving the ellipsoid ambiguity
    pd_projected: bool
    misalignment: MisalignmentEstimate


def detect_stationary_prefix(data: ImuDataset) -> int:
    """Length of the longest prefix with gyro norm below STATIONARY_GYRO_LIMIT."""
    norms = np.linalg.norm(data.gyro, axis=1)
    moving = np.flatnonzero(norms >= STATIONARY_GYRO_LIMIT)
    return int(moving[0]) if moving.size else len(data)


def stationary_motion_ratio(stationary: ImuDataset) -> float:
    """Mean gyro norm over the estimated noise spread.

    Values above 3 suggest the selected range contains motion (or a bias
    far above the noise level) and the stationarity assumption deserves a
    second look.  Constant data has no spread and rates as 0.
    """
    norm_mean = float(np.linalg.norm(stationary.gyro, axis=1).mean())
    cov_gyro = np.cov(stationary.gyro, rowvar=False)
    spread = math.sqrt(max(np.trace(cov_gyro), 0.0))
    # rounding of the sample mean makes constant data score a nonzero spread
    if spread <= 1e-12 * max(1.0, norm_mean):
        return 0.0
    return norm_mean / spread


def initial_noise_estimates(stationary: ImuDataset) -> NoiseModel:
    """Gyro bias and noise covariances from a stationary batch.

    The bias is the mean gyro reading; the covariances are sample
    covariances about the channel means.  A warning is emitted if the gyro
    deviations look too large for stationary data.
    """
    n = len(stationary)
    if n < MIN_STATIONARY_SAMPLES:
        raise DegenerateDataError(
            f"need at least {MIN_STATIONARY_SAMPLES} stationary samples, got {n}"
        )
    bias = stationary.gyro.mean(axis=0)
    cov_gyro = np.cov(stationary.gyro, rowvar=False)
    cov_acc = np.cov(stationary.acc, rowvar=False)
    cov_mag = np.cov(stationary.mag, rowvar=False)

    if stationary_motion_ratio(stationary) > 3.0:
        warnings.warn(
            "stationary gyro deviations exceed 3x their estimated spread; "
            "the selected range may contain motion",
            RuntimeWarning,
        )
    return NoiseModel.from_covariances(bias, cov_gyro, cov_acc, cov_mag)


def fit_ellipsoid(mags: np.ndarray) -> EllipsoidQuadric:
    """Fit the trace-normalized quadric to magnetometer samples."""
    pts = np.asarray(mags, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) samples, got shape {pts.shape}")
    n = pts.shape[0]
    if n < MIN_ELLIPSOID_SAMPLES:
        raise DegenerateDataError(
            f"ellipsoid fit needs at least {MIN_ELLIPSOID_SAMPLES} samples, got {n}"
        )
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[-1] <= 1e-6 * max(svals[0], 1e-12):
        raise DegenerateDataError(
            "magnetometer samples do not span 3 dimensions; "
            "rotate the sensor in all possible orientations"
        )

    y1, y2, y3 = pts[:, 0], pts[:, 1], pts[:, 2]
    # Unknowns: A11, A22, A12, A13, A23, b1, b2, b3, c with A33 = 1 - A11 - A22.
    M = np.column_stack(
        [
            y1 * y1 - y3 * y3,
            y2 * y2 - y3 * y3,
            2.0 * y1 * y2,
            2.0 * y1 * y3,
            2.0 * y2 * y3,
            y1,
            y2,
            y3,
            np.ones(n),
        ]
    )
    sol, _, rank, _ = np.linalg.lstsq(M, -y3 * y3, rcond=None)
    if rank < 9:
        raise DegenerateDataError(
            "ellipsoid regressor is rank deficient; "
            "rotate the sensor in all possible orientations"
        )
    a11, a22, a12, a13, a23 = sol[:5]
    A = np.array([[a11, a12, a13], [a12, a22, a23], [a13, a23, 1.0 - a11 - a22]])
    b = sol[5:8]
    c = float(sol[8])

    pd_projected = False
    if np.linalg.eigvalsh(A).min() <= 1e-6 * np.trace(A):
        pd_projected = True
        eigvals, eigvecs = np.linalg.eigh(A)
        eigvals = np.clip(eigvals, 1e-6 * np.trace(A), None)
        A = eigvecs @ np.diag(eigvals) @ eigvecs.T
        A = A / np.trace(A)
        A = 0.5 * (A + A.T)
        # refit the linear part with the projected A held fixed
        quad = np.einsum("ni,ij,nj->n", pts, A, pts)
        Mlin = np.column_stack([pts, np.ones(n)])
        lin, _, _, _ = np.linalg.lstsq(Mlin, -quad, rcond=None)
        b = lin[:3]
        c = float(lin[3])

    return EllipsoidQuadric(A=A, b=b, c=c, pd_projected=pd_projected)


def recover_cal(quadric: EllipsoidQuadric) -> tuple[np.ndarray, np.ndarray]:
    """Calibration (D_tilde, o0) from a fitted quadric; D_tilde is lower triangular."""
    A, b, c = quadric.A, quadric.b, quadric.c
    if np.linalg.eigvalsh(A).min() <= 0.0:
        raise InvalidQuadricError("quadric matrix is not positive definite")
    Ainv_b = np.linalg.solve(A, b)
    o0 = -0.5 * Ainv_b
    gamma = 0.25 * float(b @ Ainv_b) - c
    if gamma <= 0.0:
        raise InvalidQuadricError("quadric does not enclose the data (gamma <= 0)")
    DDt = gamma * np.linalg.inv(A)
    d_tilde = np.linalg.cholesky(0.5 * (DDt + DDt.T))
    return d_tilde, o0


def estimate_misalignment(
    data: ImuDataset,
    inclination_run: EkfRun,
    d_tilde: np.ndarray,
    o0: np.ndarray,
    max_iterations: int = 50,
    step_tolerance: float = 1e-10,
) -> MisalignmentEstimate:
    """Gauss-Newton fit of the rotation R and field vertical m_z.

    Minimizes sum_t (m_z - v_t^T R^T z_t)^2 where v_t is the body-frame
    vertical from the inclination-only filter and z_t the sphere-mapped
    magnetometer sample.  R is iterated on SO(3) through its tangent space;
    steps are halved until the objective decreases.
    """
    quats = inclination_run.quaternions
    if quats.shape[0] != len(data):
        raise ValueError("inclination run does not match the dataset length")
    # third row of R_nb per quaternion == vertical expressed in the body frame
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    vert = np.column_stack([2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)])
    zs = np.linalg.solve(d_tilde, (data.mag - o0).T).T

    rot = np.eye(3)
    m_z = float(np.einsum("ni,ni->n", vert, zs).mean())

    def objective(rot_m, mz):
        r = mz - np.einsum("ni,ni->n", vert, zs @ rot_m)
        return 0.5 * float(r @ r), r

    cost, resid = objective(rot, m_z)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        u = zs @ rot  # rows are R^T z_t
        jac = np.empty((len(data), 4))
        jac[:, :3] = np.cross(u, vert)
        jac[:, 3] = 1.0
        step, _, _, _ = np.linalg.lstsq(jac, -resid, rcond=None)

        # backtrack until the objective decreases
        scale = 1.0
        accepted = False
        for _ in range(25):
            rot_try = rot @ quat_to_rotmat(exp_map(scale * step[:3]))
            mz_try = m_z + scale * step[3]
            cost_try, resid_try = objective(rot_try, mz_try)
            if cost_try <= cost:
                rot, m_z, cost, resid = rot_try, mz_try, cost_try, resid_try
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break
        if scale * np.linalg.norm(step) < step_tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"misalignment estimation did not converge in {max_iterations} iterations "
            f"(residual {cost:.3e})",
            RuntimeWarning,
        )

    limit = 1.0 - 1e-9
    if abs(m_z) >= limit:
        warnings.warn(
            "estimated field is (near-)vertical; heading is weakly observable", RuntimeWarning
        )
        m_z = math.copysign(limit, m_z)
    return MisalignmentEstimate(
        rotation=rot, m_z=float(m_z), residual=cost, converged=converged, iterations=iterations
    )


def build_initial(
    d_tilde: np.ndarray,
    o0: np.ndarray,
    misalignment: MisalignmentEstimate,
    noise: NoiseModel,
    pd_projected: bool = False,
) -> InitialEstimate:
    """Assemble the full initial parameter set from the sub-estimates."""
    distortion = d_tilde @ misalignment.rotation
    params = CalibrationParams(
        mag=MagCalibration(distortion, o0),
        field=field_from_vertical(misalignment.m_z),
        noise=noise,
    )
    return InitialEstimate(
        params=params,
        d_tilde=np.array(d_tilde, dtype=float),
        r_mis=np.array(misalignment.rotation, dtype=float),
        pd_projected=pd_projected,
        misalignment=misalignment,
    )
