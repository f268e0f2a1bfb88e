"""Closed-form kernels for the rotation group SO(3) and its algebra so(3).

Algebra elements are stored as 3-vectors (``hat`` turns them into skew
matrices) and dual-algebra elements as 3-vectors paired by the Euclidean
dot product.

Perturbations of group elements are left-trivialized throughout: a tangent
vector at ``R`` is written ``R @ hat(w)``. With that convention the
differential of the exponential is the matrix ``dexp_matrix(v)`` with

    d/ds exp(v + s*w) |_{s=0} = exp(v) @ hat(dexp_matrix(v) @ w).
"""

import math

import numpy as np

from .errors import AngleNearPi

__all__ = [
    "hat",
    "vee",
    "exp_so3",
    "log_so3",
    "adjoint",
    "coadjoint",
    "dexp_matrix",
    "dexp_inv_matrix",
    "dexp",
    "dexp_dual",
    "dexp_inv_dual",
    "rotation_error",
    "is_rotation",
]

# below this angle the Rodrigues scalars switch to their Taylor expansions
SMALL_ANGLE = 1e-8
# the third-order dexp coefficients lose digits earlier than the Rodrigues ones
SERIES_ANGLE = 1e-3
# log_so3 requires trace(R) > -1 + NEAR_PI_TRACE
NEAR_PI_TRACE = 1e-9
# above this angle the log axis is read off the symmetric part of R
SYMMETRIC_AXIS_ANGLE = 2.5


def hat(v):
    """Skew matrix of ``v`` so that ``hat(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(A):
    """Inverse of :func:`hat`; reads the three independent entries of ``A``."""
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def _rodrigues_coeffs(theta):
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0
    s = math.sin(0.5 * theta)
    return math.sin(theta) / theta, 2.0 * s * s / (theta * theta)


def exp_so3(v):
    """Rotation matrix ``exp(hat(v))`` via the Rodrigues formula."""
    v = np.asarray(v, dtype=float)
    t2 = float(v @ v)
    a, b = _rodrigues_coeffs(math.sqrt(t2))
    # hat(v)^2 = v v^T - |v|^2 I
    R = b * np.outer(v, v)
    R[0, 0] += 1.0 - b * t2
    R[1, 1] += 1.0 - b * t2
    R[2, 2] += 1.0 - b * t2
    x, y, z = a * v
    R[0, 1] -= z
    R[1, 0] += z
    R[0, 2] += y
    R[2, 0] -= y
    R[1, 2] -= x
    R[2, 1] += x
    return R


def log_so3(R):
    """Rotation vector ``v`` with ``exp_so3(v) == R`` and ``|v| < pi``.

    Raises
    ------
    AngleNearPi
        If ``trace(R) <= -1 + 1e-9``; the chart is not trusted there.
    """
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if not tr > -1.0 + NEAR_PI_TRACE:
        raise AngleNearPi(f"rotation angle too close to pi (trace={tr!r})")
    skew = vee(R - R.T)  # 2 sin(theta) n
    c = 0.5 * (tr - 1.0)
    s = 0.5 * np.linalg.norm(skew)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * skew
    if theta < SYMMETRIC_AXIS_ANGLE:
        return (0.5 * theta / math.sin(theta)) * skew
    # near pi the skew part is tiny; (R + R^T)/2 - cI = (1 - c) n n^T
    B = 0.5 * (R + R.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(B)))
    n = B[:, i] / math.sqrt(B[i, i] * (1.0 - c))
    n /= np.linalg.norm(n)
    if n @ skew < 0.0:
        n = -n
    return theta * n


def adjoint(R, v):
    """Adjoint action ``vee(R hat(v) R^T)``, which equals ``R @ v`` on SO(3)."""
    return np.asarray(R) @ np.asarray(v, dtype=float)


def coadjoint(R, a):
    """Coadjoint action ``Ad*_{R^-1} a``.

    Defined by ``<coadjoint(R, a), v> = <a, adjoint(R.T, v)>``; in
    coordinates this is ``(R^T)^T a = R @ a``.
    """
    return np.asarray(R) @ np.asarray(a, dtype=float)


def _dexp_coeffs(theta):
    """Coefficients ``(b, c)`` with ``dexp_matrix(v) = I - b K + c K^2``."""
    _, b = _rodrigues_coeffs(theta)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - math.sin(theta)) / theta**3
    return b, c


def _check_angle(theta):
    if not theta < np.pi:
        raise AngleNearPi(f"|v| = {theta!r} is outside the exponential chart")


def dexp_matrix(v):
    """Left-trivialized differential of ``exp`` at ``v`` as a 3x3 matrix."""
    v = np.asarray(v, dtype=float)
    theta = math.sqrt(float(v @ v))
    _check_angle(theta)
    b, c = _dexp_coeffs(theta)
    K = hat(v)
    return np.eye(3) - b * K + c * (K @ K)


def dexp_inv_matrix(v):
    """Inverse of :func:`dexp_matrix`, in closed form."""
    v = np.asarray(v, dtype=float)
    theta = math.sqrt(float(v @ v))
    _check_angle(theta)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        one_minus_cos = 2.0 * math.sin(0.5 * theta) ** 2
        d = (1.0 - theta * math.sin(theta) / (2.0 * one_minus_cos)) / (theta * theta)
    K = hat(v)
    return np.eye(3) + 0.5 * K + d * (K @ K)


def dexp(v, w):
    """Apply the trivialized differential of ``exp`` at ``v`` to ``w``."""
    return dexp_matrix(v) @ np.asarray(w, dtype=float)


def dexp_dual(v, a):
    """Dual of :func:`dexp`: ``<dexp_dual(v, a), w> == <a, dexp(v, w)>``."""
    return dexp_matrix(v).T @ np.asarray(a, dtype=float)


def dexp_inv_dual(v, a):
    """Dual of the inverse differential, ``dexp_matrix(v)^{-T} a``.

    This is the map that carries a multiplier on the exponential
    coordinates of a step to the multiplier on the left-trivialized group
    perturbation; ``dexp_dual`` undoes it.
    """
    return dexp_inv_matrix(v).T @ np.asarray(a, dtype=float)


def rotation_error(R):
    """Return ``(max|R^T R - I|, |det R - 1|)``."""
    R = np.asarray(R, dtype=float)
    return float(np.max(np.abs(R.T @ R - np.eye(3)))), float(abs(np.linalg.det(R) - 1.0))


def is_rotation(R, tol=1e-10):
    orth, det = rotation_error(R)
    return orth <= tol and det <= tol


# -- batched forms -------------------------------------------------------------
# Used on whole horizons at once; each agrees with its single-vector
# counterpart to rounding.

def hat_batch(V):
    """Stack of skew matrices for rows of ``V`` (``(K, 3)`` -> ``(K, 3, 3)``)."""
    V = np.asarray(V, dtype=float)
    K = np.zeros(V.shape[:-1] + (3, 3))
    K[..., 0, 1] = -V[..., 2]
    K[..., 0, 2] = V[..., 1]
    K[..., 1, 0] = V[..., 2]
    K[..., 1, 2] = -V[..., 0]
    K[..., 2, 0] = -V[..., 1]
    K[..., 2, 1] = V[..., 0]
    return K


def _batch_coeffs(theta):
    """Rodrigues ``(a, b)`` and dexp ``c`` coefficients for an array of angles."""
    t2 = theta * theta
    safe = np.where(theta < SMALL_ANGLE, 1.0, theta)
    a = np.where(theta < SMALL_ANGLE, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe)
    b = np.where(theta < SMALL_ANGLE, 0.5 - t2 / 24.0, 2.0 * half * half / (safe * safe))
    safe_c = np.where(theta < SERIES_ANGLE, 1.0, theta)
    c = np.where(theta < SERIES_ANGLE, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe_c - np.sin(safe_c)) / safe_c**3)
    return a, b, c


def exp_so3_batch(V):
    """:func:`exp_so3` applied to every row of ``V``."""
    V = np.asarray(V, dtype=float)
    theta = np.linalg.norm(V, axis=-1)
    a, b, _ = _batch_coeffs(theta)
    K = hat_batch(V)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def dexp_matrix_batch(V):
    """:func:`dexp_matrix` applied to every row of ``V``."""
    V = np.asarray(V, dtype=float)
    theta = np.linalg.norm(V, axis=-1)
    if np.any(theta >= np.pi):
        raise AngleNearPi(f"|v| = {float(np.max(theta))!r} is outside the exponential chart")
    _, b, c = _batch_coeffs(theta)
    K = hat_batch(V)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)
