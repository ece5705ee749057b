"""Euler-angle rotations used by the equivariant decoder.

Angles are ``(alpha, beta, gamma)`` about the x, y and z axes. The composed
matrix is ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``; the order tag below is
written into checkpoints.
"""

from __future__ import annotations

import numpy as np

EULER_ORDER = "zyx"


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_matrix(angles) -> np.ndarray:
    """Rotation matrix for ``angles = (alpha, beta, gamma)`` in radians."""
    a, b, g = (float(v) for v in angles)
    return _rz(g) @ _ry(b) @ _rx(a)


def euler_matrix_derivatives(angles) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives ``dR/dalpha, dR/dbeta, dR/dgamma``."""
    a, b, g = (float(v) for v in angles)
    rx, ry, rz = _rx(a), _ry(b), _rz(g)
    return rz @ ry @ _drx(a), rz @ _dry(b) @ rx, _drz(g) @ ry @ rx


def matrix_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_matrix` (one of the two branches)."""
    R = np.asarray(R, dtype=float)
    sb = -R[2, 0]
    sb = min(1.0, max(-1.0, sb))
    beta = np.arcsin(sb)
    if abs(np.cos(beta)) > 1e-9:
        alpha = np.arctan2(R[2, 1], R[2, 2])
        gamma = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold everything into gamma
        alpha = 0.0
        gamma = np.arctan2(-R[0, 1], R[1, 1])
    return np.array([alpha, beta, gamma])


def geodesic_distance(R1, R2) -> float:
    """Angle in radians of the relative rotation ``R1^T R2``."""
    M = np.asarray(R1).T @ np.asarray(R2)
    c = (np.trace(M) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation drawn from a unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
