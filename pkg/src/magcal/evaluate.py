"""Validation metrics: TRIAD attitude, residual statistics, norm profiles,
and the 90-degree rotation table.

The TRIAD construction uses gravity as the primary (exact) direction and
the magnetic field only for the remaining heading degree of freedom, so
magnetometer errors show up purely as heading errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .ekf import EkfRun
from .models import GRAVITY_NAV, ImuDataset, LocalField, MagCalibration, apply_calibration

HISTOGRAM_RANGE = (-6.0, 6.0)
HISTOGRAM_BINS = 61
OUTLIER_LIMIT = 5.0

_MIN_PAIR_ANGLE = math.radians(1.0)


class DegenerateGeometryError(ValueError):
    """Vector pair too close to parallel to determine an attitude."""


@dataclass(frozen=True, eq=False)
class ResidualStats:
    """Moments and histogram of the pooled normalized innovations."""

    count: int
    mean: float
    std: float
    excess_kurtosis: float
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    outlier_count: int


@dataclass(frozen=True, eq=False)
class HeadingTable:
    """Deviations from 90 degrees of consecutive heading differences."""

    labels: list
    deviations: list  # one ndarray of degrees per sequence
    mean_abs: float
    max_abs: float


def _unit(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateGeometryError(f"{name} vector is zero")
    return v / n


def triad(acc_mean: np.ndarray, mag_mean: np.ndarray, g_nav: np.ndarray | None = None,
          m_nav: np.ndarray | None = None) -> np.ndarray:
    """Attitude R_nb from one accelerometer/magnetometer vector pair.

    acc_mean and mag_mean are body-frame observations of -g and the local
    field; g_nav and m_nav are their navigation-frame references.  Raises
    DegenerateGeometryError when a pair is within 1 degree of parallel.
    """
    if g_nav is None:
        g_nav = GRAVITY_NAV
    if m_nav is None:
        raise ValueError("m_nav (navigation-frame field direction) is required")
    up_n = _unit(-np.asarray(g_nav, dtype=float), "gravity reference")
    m_n = _unit(m_nav, "field reference")
    up_b = _unit(acc_mean, "accelerometer")
    m_b = _unit(mag_mean, "magnetometer")

    for a, b in ((up_n, m_n), (up_b, m_b)):
        angle = math.acos(max(-1.0, min(1.0, float(a @ b))))
        if min(angle, math.pi - angle) < _MIN_PAIR_ANGLE:
            raise DegenerateGeometryError("gravity and field directions are (anti)parallel")

    def frame(primary, secondary):
        t2 = np.cross(primary, secondary)
        t2 /= np.linalg.norm(t2)
        return np.column_stack([primary, t2, np.cross(primary, t2)])

    return frame(up_n, m_n) @ frame(up_b, m_b).T


def residual_stats(run: EkfRun, data: ImuDataset) -> ResidualStats:
    """Statistics of S_t^{-1/2} (y_t - yhat_t) pooled over all steps and axes."""
    m = run.measurement_dim
    meas = data.acc if m == 3 else np.hstack([data.acc, data.mag])
    if meas.shape[0] != run.y_pred.shape[0]:
        raise ValueError("run and dataset lengths differ")
    pooled = np.empty((run.y_pred.shape[0], m))
    for t in range(run.y_pred.shape[0]):
        L = np.linalg.cholesky(run.innov_cov[t])
        pooled[t] = solve_triangular(L, meas[t] - run.y_pred[t], lower=True, check_finite=False)
    flat = pooled.ravel()

    mean = float(flat.mean())
    std = float(flat.std(ddof=1)) if flat.size > 1 else 0.0
    if std > 0.0:
        zs = (flat - mean) / std
        kurt = float((zs**4).mean() - 3.0)
    else:
        kurt = 0.0
    counts, edges = np.histogram(np.clip(flat, *HISTOGRAM_RANGE), bins=HISTOGRAM_BINS,
                                 range=HISTOGRAM_RANGE)
    return ResidualStats(
        count=flat.size,
        mean=mean,
        std=std,
        excess_kurtosis=kurt,
        bin_edges=edges,
        bin_counts=counts,
        outlier_count=int((np.abs(flat) > OUTLIER_LIMIT).sum()),
    )


def norm_profile(data: ImuDataset, cal: MagCalibration) -> np.ndarray:
    """Norm of the calibrated magnetometer measurement per sample."""
    return np.linalg.norm(apply_calibration(data.mag, cal), axis=1)


def _fold_degrees(angle: float) -> float:
    """Fold an angle in degrees into (-180, 180]."""
    folded = math.fmod(angle, 360.0)
    if folded <= -180.0:
        folded += 360.0
    elif folded > 180.0:
        folded -= 360.0
    return folded


def ninety_degree_table(sequences, cal: MagCalibration, local_field: LocalField) -> HeadingTable:
    """Deviation from 90 degrees for consecutive orientations in each sequence.

    ``sequences`` is an iterable of ``(label, segments)`` where each segment
    is an ``(acc_mean, mag_mean)`` pair of raw sensor means.  Magnetometer
    means are calibrated before the TRIAD solve.  Each protocol step turns
    the block 90 degrees about the vertical, so the heading change is read
    off the relative attitude between consecutive segments (the scalar ZYX
    heading would be undefined for the face-sideways placements); changes
    are folded into (-180, 180] and compared against 90 degrees regardless
    of the turn direction.
    """
    m_nav = local_field.vector
    labels = []
    deviations = []
    for label, segments in sequences:
        if len(segments) < 2:
            raise ValueError(f"sequence {label!r} needs at least 2 segments")
        attitudes = []
        for acc_mean, mag_mean in segments:
            calibrated = apply_calibration(np.asarray(mag_mean, dtype=float), cal)
            attitudes.append(triad(acc_mean, calibrated, m_nav=m_nav))
        devs = []
        for r_prev, r_next in zip(attitudes[:-1], attitudes[1:]):
            r_diff = r_next @ r_prev.T  # ~ rotation about the navigation vertical
            change = math.degrees(math.atan2(r_diff[1, 0], r_diff[0, 0]))
            devs.append(abs(_fold_degrees(change)) - 90.0)
        labels.append(label)
        deviations.append(np.array(devs))
    all_devs = np.concatenate(deviations)
    return HeadingTable(
        labels=labels,
        deviations=deviations,
        mean_abs=float(np.abs(all_devs).mean()),
        max_abs=float(np.abs(all_devs).max()),
    )
