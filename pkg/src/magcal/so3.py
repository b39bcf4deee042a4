"""Quaternion and rotation-matrix algebra on SO(3).

Conventions used throughout the package:

* Quaternions are Hamilton (right-handed), stored w-first as length-4
  ndarrays ``[w, x, y, z]``.
* ``q`` and ``-q`` encode the same rotation; no function assumes a sign
  unless it says so.
* ``quat_to_rotmat(q)`` returns the matrix ``R`` with ``R @ v`` rotating
  ``v`` by ``q``.  For an orientation quaternion q_nb (body relative to
  navigation) this matrix maps body vectors into the navigation frame.
* Euler angles are ZYX: heading about z, then pitch about y, then roll
  about x.  ``quat_to_euler`` returns ``(roll, pitch, heading)`` with
  heading in (-pi, pi].
"""

from __future__ import annotations

import math
import warnings

import numpy as np

# Below this rotation angle (rad) exp_map switches to its series expansion.
SMALL_ANGLE = 1e-8

_GIMBAL_MARGIN = 1e-6  # pitch within this of +-pi/2 triggers the gimbal convention


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 (composition: q1 applied after q2), renormalized."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    out = np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )
    return quat_normalize(out)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    """Conjugate (inverse for unit quaternions)."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def exp_map(eta: np.ndarray) -> np.ndarray:
    """Map a rotation vector (axis * angle, rad) to a unit quaternion.

    q = (cos(|eta|/2), sin(|eta|/2) * eta/|eta|).  A second-order series
    is used below SMALL_ANGLE to avoid dividing by a vanishing norm.
    """
    e0, e1, e2 = float(eta[0]), float(eta[1]), float(eta[2])
    angle_sq = e0 * e0 + e1 * e1 + e2 * e2
    angle = math.sqrt(angle_sq)
    if angle < SMALL_ANGLE:
        w = 1.0 - angle_sq / 8.0
        k = 0.5 - angle_sq / 48.0
    else:
        w = math.cos(0.5 * angle)
        k = math.sin(0.5 * angle) / angle
    return np.array([w, k * e0, k * e1, k * e2])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (R @ v rotates v by q)."""
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix (Shepperd's method), w >= 0."""
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def quat_to_euler(q: np.ndarray) -> tuple[float, float, float]:
    """ZYX Euler angles (roll, pitch, heading) of a unit quaternion.

    Near pitch = +-pi/2 the decomposition is ambiguous; by convention the
    roll is set to zero and absorbed into the heading, and a RuntimeWarning
    is emitted.
    """
    w, x, y, z = q
    sinp = 2.0 * (w * y - x * z)
    if abs(sinp) >= math.cos(_GIMBAL_MARGIN):
        warnings.warn(
            "pitch within 1e-6 of +-pi/2; roll set to 0 by convention", RuntimeWarning
        )
        pitch = math.copysign(0.5 * math.pi, sinp)
        # with roll := 0, R[0,1] = -sin(heading), R[1,1] = cos(heading)
        heading = math.atan2(-2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z))
        return 0.0, pitch, heading
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = math.asin(sinp)
    heading = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return roll, pitch, heading


def euler_to_quat(roll: float, pitch: float, heading: float) -> np.ndarray:
    """Unit quaternion for ZYX Euler angles (heading about z applied last)."""
    cr, sr = math.cos(0.5 * roll), math.sin(0.5 * roll)
    cp, sp = math.cos(0.5 * pitch), math.sin(0.5 * pitch)
    ch, sh = math.cos(0.5 * heading), math.sin(0.5 * heading)
    return np.array(
        [
            ch * cp * cr + sh * sp * sr,
            ch * cp * sr - sh * sp * cr,
            ch * sp * cr + sh * cp * sr,
            sh * cp * cr - ch * sp * sr,
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    v0, v1, v2 = v
    return np.array([[0.0, -v2, v1], [v2, 0.0, -v0], [-v1, v0, 0.0]])
