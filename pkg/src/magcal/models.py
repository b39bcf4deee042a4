"""Sensor measurement models, local-field parametrization and the parameter codec.

The navigation frame has its x-axis along the horizontal component of the
local magnetic field (local magnetic north) and its z-axis up, so gravity
is ``(0, 0, -9.81)`` m/s^2 and the unit field with dip angle ``delta`` is
``(cos delta, 0, -sin delta)`` (field dips below the horizon for positive
``delta``, as in the northern hemisphere).

The full parameter vector packs to exactly 34 numbers:

====== ===== =======================================================
offset count content
====== ===== =======================================================
0      9     distortion matrix D, row-major
9      3     magnetometer offset o
12     1     dip angle (rad)
13     3     gyroscope bias (rad/s)
16     6     lower Cholesky factor of the gyro noise covariance
22     6     lower Cholesky factor of the accelerometer noise covariance
28     6     lower Cholesky factor of the magnetometer noise covariance
====== ===== =======================================================

Cholesky factors are stored row-wise ``(L00, L10, L11, L20, L21, L22)``
with nonnegative diagonals; the reconstructed covariance ``L @ L.T`` is
symmetric positive semidefinite for any packed vector.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81
GRAVITY_NAV = np.array([0.0, 0.0, -GRAVITY])

N_PARAMS = 34

_TRIL = np.tril_indices(3)


class InvalidCalibrationError(ValueError):
    """Raised for a distortion matrix too close to singular to invert."""


def _as_matrix3(m, name: str) -> np.ndarray:
    m = np.array(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _as_vector3(v, name: str) -> np.ndarray:
    v = np.array(v, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite entries")
    return v


def chol_lower_psd(matrix: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T = matrix for a symmetric PSD matrix.

    Falls back to an eigenvalue-clipped factorization when the matrix is
    singular (e.g. an exactly-zero sample covariance); the diagonal of L is
    canonicalized to be nonnegative.
    """
    matrix = 0.5 * (matrix + matrix.T)
    try:
        L = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(matrix)
        if eigvals.min() < -1e-8 * max(1.0, abs(eigvals).max()):
            raise ValueError("matrix is not positive semidefinite") from None
        root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        # QR of root.T gives root = R.T Q.T, so R.T is a lower factor of the product
        _, r = np.linalg.qr(root.T)
        L = r.T
    signs = np.where(np.diag(L) < 0.0, -1.0, 1.0)
    return L * signs


@dataclass(frozen=True, eq=False)
class MagCalibration:
    """Distortion matrix D and offset o mapping the unit field to raw units."""

    distortion: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        D = _as_matrix3(self.distortion, "distortion")
        o = _as_vector3(self.offset, "offset")
        scale = np.linalg.norm(D)
        if abs(np.linalg.det(D)) < 1e-12 * scale**3:
            raise InvalidCalibrationError("distortion matrix is (near-)singular")
        object.__setattr__(self, "distortion", D)
        object.__setattr__(self, "offset", o)

    @classmethod
    def identity(cls) -> "MagCalibration":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class LocalField:
    """Normalized local magnetic field, parametrized by its dip angle (rad)."""

    dip: float

    @property
    def vector(self) -> np.ndarray:
        """Unit field (cos dip, 0, -sin dip) in the navigation frame."""
        return np.array([math.cos(self.dip), 0.0, -math.sin(self.dip)])

    @property
    def vertical(self) -> float:
        """z-component of the unit field."""
        return -math.sin(self.dip)


def field_from_dip(dip: float) -> LocalField:
    """Local field from its dip angle in radians."""
    return LocalField(float(dip))


def field_from_vertical(m_z: float) -> LocalField:
    """Local field from its vertical component; |m_z| is clamped below 1.

    The horizontal component is positive by construction.
    """
    m_z = float(m_z)
    limit = 1.0 - 1e-9
    if abs(m_z) > limit:
        warnings.warn(f"vertical field component {m_z} clamped to +-{limit}", RuntimeWarning)
        m_z = math.copysign(limit, m_z)
    return LocalField(math.asin(-m_z))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Gyro bias plus the three noise covariances in Cholesky form."""

    gyro_bias: np.ndarray
    chol_gyro: np.ndarray
    chol_acc: np.ndarray
    chol_mag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro_bias", _as_vector3(self.gyro_bias, "gyro_bias"))
        for name in ("chol_gyro", "chol_acc", "chol_mag"):
            L = np.tril(_as_matrix3(getattr(self, name), name))
            signs = np.where(np.diag(L) < 0.0, -1.0, 1.0)
            object.__setattr__(self, name, L * signs)

    @property
    def cov_gyro(self) -> np.ndarray:
        return self.chol_gyro @ self.chol_gyro.T

    @property
    def cov_acc(self) -> np.ndarray:
        return self.chol_acc @ self.chol_acc.T

    @property
    def cov_mag(self) -> np.ndarray:
        return self.chol_mag @ self.chol_mag.T

    @classmethod
    def from_covariances(cls, gyro_bias, cov_gyro, cov_acc, cov_mag) -> "NoiseModel":
        return cls(
            gyro_bias,
            chol_lower_psd(_as_matrix3(cov_gyro, "cov_gyro")),
            chol_lower_psd(_as_matrix3(cov_acc, "cov_acc")),
            chol_lower_psd(_as_matrix3(cov_mag, "cov_mag")),
        )

    @classmethod
    def zero(cls) -> "NoiseModel":
        z = np.zeros((3, 3))
        return cls(np.zeros(3), z, z, z)


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    """Everything the likelihood depends on: D, o, field, bias and noise."""

    mag: MagCalibration
    field: LocalField
    noise: NoiseModel

    @classmethod
    def identity(cls, dip: float = 0.0) -> "CalibrationParams":
        return cls(MagCalibration.identity(), LocalField(dip), NoiseModel.zero())


def pack_params(params: CalibrationParams) -> np.ndarray:
    """Flatten a CalibrationParams into the canonical 34-vector."""
    noise = params.noise
    return np.concatenate(
        [
            params.mag.distortion.ravel(),
            params.mag.offset,
            [params.field.dip],
            noise.gyro_bias,
            noise.chol_gyro[_TRIL],
            noise.chol_acc[_TRIL],
            noise.chol_mag[_TRIL],
        ]
    )


def unpack_params(vec: np.ndarray) -> CalibrationParams:
    """Inverse of :func:`pack_params`; raises on a wrong-length vector."""
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if vec.shape != (N_PARAMS,):
        raise ValueError(f"parameter vector must have length {N_PARAMS}, got {vec.shape[0]}")

    def tril(six):
        L = np.zeros((3, 3))
        L[_TRIL] = six
        return L

    return CalibrationParams(
        mag=MagCalibration(vec[:9].reshape(3, 3), vec[9:12]),
        field=LocalField(float(vec[12])),
        noise=NoiseModel(vec[13:16], tril(vec[16:22]), tril(vec[22:28]), tril(vec[28:34])),
    )


def model_mag(R_bn: np.ndarray, cal: MagCalibration, local_field: LocalField) -> np.ndarray:
    """Noise-free magnetometer measurement D R_bn m_n + o."""
    return cal.distortion @ (R_bn @ local_field.vector) + cal.offset


def model_accel(R_bn: np.ndarray) -> np.ndarray:
    """Noise-free accelerometer measurement -R_bn g_n (zero acceleration)."""
    return -(R_bn @ GRAVITY_NAV)


def correct_gyro(y_gyro: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """Bias-corrected angular rate."""
    return np.asarray(y_gyro, dtype=float) - noise.gyro_bias


def apply_calibration(y_mag: np.ndarray, cal: MagCalibration) -> np.ndarray:
    """Map raw magnetometer readings to the unit sphere: D^-1 (y - o).

    Accepts a single 3-vector or an (N, 3) batch.
    """
    y = np.asarray(y_mag, dtype=float)
    single = y.ndim == 1
    try:
        out = np.linalg.solve(cal.distortion, (np.atleast_2d(y) - cal.offset).T).T
    except np.linalg.LinAlgError as exc:
        raise InvalidCalibrationError("distortion matrix is singular") from exc
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class ImuSample:
    """One time-synchronized gyro/accel/mag sample."""

    t: float
    gyro: np.ndarray
    acc: np.ndarray
    mag: np.ndarray


@dataclass(frozen=True, eq=False)
class ImuDataset:
    """Column-oriented IMU + magnetometer recording with strict timestamps."""

    time: np.ndarray  # (N,) seconds, strictly increasing
    gyro: np.ndarray  # (N, 3) rad/s
    acc: np.ndarray  # (N, 3) m/s^2
    mag: np.ndarray  # (N, 3) raw magnetometer units

    def __post_init__(self):
        t = np.asarray(self.time, dtype=float).reshape(-1)
        n = t.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        arrays = {}
        for name in ("gyro", "acc", "mag"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (n, 3):
                raise ValueError(f"{name} must have shape ({n}, 3), got {a.shape}")
            arrays[name] = a
        if not np.isfinite(t).all():
            raise ValueError("timestamps contain non-finite values")
        if n > 1 and not (np.diff(t) > 0).all():
            bad = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1
            raise ValueError(f"timestamps not strictly increasing at sample {bad}")
        object.__setattr__(self, "time", t)
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @classmethod
    def from_rate(cls, gyro, acc, mag, rate: float = 100.0, t0: float = 0.0) -> "ImuDataset":
        """Build a dataset from equally spaced samples at `rate` Hz."""
        gyro = np.asarray(gyro, dtype=float)
        t = t0 + np.arange(gyro.shape[0]) / float(rate)
        return cls(t, gyro, acc, mag)

    def __len__(self) -> int:
        return self.time.shape[0]

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(float(self.time[i]), self.gyro[i], self.acc[i], self.mag[i])

    def slice(self, start: int, stop: int) -> "ImuDataset":
        """Half-open sample range [start, stop) as a new dataset."""
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"invalid sample range {start}:{stop} for {len(self)} samples")
        return ImuDataset(
            self.time[start:stop], self.gyro[start:stop], self.acc[start:stop], self.mag[start:stop]
        )

    def decimate(self, factor: int) -> "ImuDataset":
        """Keep every `factor`-th sample (factor 1 returns self)."""
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        if factor == 1:
            return self
        return ImuDataset(
            self.time[::factor], self.gyro[::factor], self.acc[::factor], self.mag[::factor]
        )
