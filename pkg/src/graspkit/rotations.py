"""Axis-angle rotation utilities shared by the hand and grasp-optimization modules.

All rotations are parameterized as 3-vectors ``r`` whose direction is the
rotation axis and whose norm is the angle in radians.  The Rodrigues formula
and its derivative are evaluated with a second-order Taylor expansion below
``SMALL_ANGLE`` so gradients stay finite through the origin.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector: skew(v) @ x == cross(v, x)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_from_axis_angle(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for an axis-angle vector.

    R = I + a*K + b*K^2 with K = skew(r), a = sin(t)/t, b = (1-cos(t))/t^2
    where t = |r|.  Near t = 0 the coefficients use their Taylor series.
    """
    r = np.asarray(r, dtype=float)
    t2 = float(r @ r)
    t = np.sqrt(t2)
    if t < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = np.sin(t) / t
        b = (1.0 - np.cos(t)) / t2
    K = skew(r)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_jacobian(r: np.ndarray) -> np.ndarray:
    """Derivative of the Rodrigues matrix: shape (3, 3, 3), [i] = dR/dr_i.

    Uses dR/dr_i = g_a r_i K + a E_i + g_b r_i K^2 + b (E_i K + K E_i)
    with E_i = skew(e_i), g_a = (da/dt)/t, g_b = (db/dt)/t; the g terms are
    Taylor-expanded near t = 0 where the quotient is otherwise singular.
    """
    r = np.asarray(r, dtype=float)
    t2 = float(r @ r)
    t = np.sqrt(t2)
    if t < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
        g_a = -1.0 / 3.0 + t2 / 30.0
        g_b = -1.0 / 12.0 + t2 / 180.0
    else:
        a = np.sin(t) / t
        b = (1.0 - np.cos(t)) / t2
        g_a = (t * np.cos(t) - np.sin(t)) / (t2 * t)
        g_b = (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (t2 * t2)
    K = skew(r)
    K2 = K @ K
    out = np.empty((3, 3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        E = skew(e)
        out[i] = g_a * r[i] * K + a * E + g_b * r[i] * K2 + b * (E @ K + K @ E)
    return out


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_from_axis_angle; returns the angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    t = np.arccos(cos_t)
    if t < SMALL_ANGLE:
        # R ~ I + K: read the axis*angle straight off the skew part.
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - t < 1e-6:
        # Near pi the skew part vanishes; recover the axis from R + I.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(M), 0.0, None))
        k = int(np.argmax(axis))
        axis = M[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the largest off-diagonal skew component.
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if s @ axis < 0:
            axis = -axis
        return t * axis
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (2.0 * np.sin(t))
    return t * axis
