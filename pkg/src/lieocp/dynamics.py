"""Controlled plants evolving on SO(3) x R^n.

A plant advances ``(q, x)`` by

    q_{t+1} = q_t f_t(q_t, x_t)
    x_{t+1} = g_t(q_t, x_t, u_t)

and exposes first derivatives. Derivatives in the group direction are
taken through left-trivialized perturbations ``q exp(hat(eps * d))``, and
the group step is differentiated through its exponential coordinates
``phi_t = log(f_t)``.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import lie
from .errors import NoConvergence, SingularImplicitJacobian

__all__ = [
    "InertiaData",
    "AttitudeState",
    "StageDerivatives",
    "SystemTrajectory",
    "Plant",
    "AttitudePlant",
    "LinearPlant",
    "solve_relative_rotation",
    "attitude_residual",
    "attitude_step",
    "rollout",
    "rollout_batch",
    "plant_derivatives",
]

NEWTON_TOL = 1e-11
NEWTON_MAX_ITER = 50
FD_STEP = 1e-6
COND_MAX = 1e12


@dataclass(frozen=True)
class InertiaData:
    """Inertia ``J`` (kg m^2) and step ``h`` (s) of the discrete rigid body.

    ``J_d = tr(J) I - J`` by default. ``convention="momentum"`` selects
    ``J_d = tr(J)/2 I - J``, for which ``Pi`` reduces to ``J @ omega`` in the
    continuous limit.
    """

    J: np.ndarray
    h: float
    convention: str = "trace"

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        if J.ndim == 1:
            J = np.diag(J)
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ValueError("J must be a symmetric 3x3 matrix or 3 principal moments")
        if np.any(np.diag(J) <= 0.0):
            raise ValueError("diagonal entries of J must be positive")
        if not self.h > 0.0:
            raise ValueError("step length h must be positive")
        if self.convention not in ("trace", "momentum"):
            raise ValueError(f"unknown J_d convention {self.convention!r}")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", float(self.h))

    @cached_property
    def J_d(self):
        scale = 1.0 if self.convention == "trace" else 0.5
        return scale * np.trace(self.J) * np.eye(3) - self.J

    @cached_property
    def M(self):
        """Linearization ``tr(J_d) I - J_d`` of the implicit residual at rest."""
        Jd = self.J_d
        return np.trace(Jd) * np.eye(3) - Jd

    @cached_property
    def M_inv(self):
        return np.linalg.inv(self.M)


@dataclass(frozen=True)
class AttitudeState:
    R: np.ndarray
    Pi: np.ndarray


@dataclass
class StageDerivatives:
    """First derivatives of one stage.

    ``phi`` is ``log(f_t)``; ``phi_q``/``phi_x`` are its derivatives and
    ``g_q``/``g_x``/``g_u`` those of the vector dynamics. Group columns refer
    to left-trivialized perturbations.
    """

    phi: np.ndarray
    phi_q: np.ndarray
    phi_x: np.ndarray
    g_q: np.ndarray
    g_x: np.ndarray
    g_u: np.ndarray


@dataclass(frozen=True, eq=False)
class SystemTrajectory:
    """States ``q[0..N]``, ``x[0..N]`` and step coordinates ``phi[0..N-1]``."""

    q: np.ndarray
    x: np.ndarray
    phi: np.ndarray

    @property
    def N(self):
        return self.phi.shape[0]


class Plant(ABC):
    """Dynamics ``q+ = q f_t(q, x)``, ``x+ = g_t(q, x, u)``."""

    n: int
    m: int

    @abstractmethod
    def step_log(self, t, q, x):
        """Exponential coordinates ``log(f_t(q, x))`` of the group step."""

    @abstractmethod
    def step_state(self, t, q, x, u):
        """``g_t(q, x, u)``."""

    @abstractmethod
    def derivatives(self, t, q, x, u, phi=None):
        """:class:`StageDerivatives` at one stage point.

        ``phi`` optionally passes ``log f_t(q, x)`` already computed by a
        rollout; plants may ignore it.
        """

    def derivatives_batch(self, q, x, u, phi):
        """Derivative packs of stages ``0..N-1`` of a rolled-out trajectory.

        ``q``, ``x`` hold states ``0..N`` (or ``0..N-1``), ``phi`` the step
        coordinates. Plants may override this with a vectorized version.
        """
        return [self.derivatives(t, q[t], x[t], u[t], phi=phi[t]) for t in range(len(u))]

    def step_batch(self, t, q, x, u):
        """:meth:`step` for stacked states ``x`` (``(B, n)``) and controls ``u``."""
        out = [self.step(t, qb, xb, ub) for qb, xb, ub in zip(q, x, u)]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    def step_group(self, t, q, x):
        return lie.exp_so3(self.step_log(t, q, x))

    def step(self, t, q, x, u):
        """``(log f_t(q, x), g_t(q, x, u))`` in one call."""
        return self.step_log(t, q, x), self.step_state(t, q, x, u)


class LinearPlant(Plant):
    """Frozen group part (``f_t = I``) and ``x+ = A x + B_t u``.

    ``B`` is either ``(n, m)`` or a per-stage stack ``(N, n, m)``.
    """

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        self.B = B
        self.n = self.A.shape[0]
        self.m = B.shape[-1]

    def _B(self, t):
        return self.B[t] if self.B.ndim == 3 else self.B

    def step_log(self, t, q, x):
        return np.zeros(3)

    def step_state(self, t, q, x, u):
        return self.A @ np.asarray(x, dtype=float) + self._B(t) @ np.asarray(u, dtype=float)

    def derivatives(self, t, q, x, u, phi=None):
        return StageDerivatives(
            phi=np.zeros(3),
            phi_q=np.zeros((3, 3)),
            phi_x=np.zeros((3, self.n)),
            g_q=np.zeros((self.n, 3)),
            g_x=self.A.copy(),
            g_u=self._B(t).copy(),
        )


def attitude_residual(S, Pi, inertia):
    """``vee(S J_d - J_d S^T) - h Pi``; zero for the exact relative rotation."""
    Jd = inertia.J_d
    return lie.vee(S @ Jd - Jd @ S.T) - inertia.h * np.asarray(Pi, dtype=float)


_HAT_BASIS = np.array([lie.hat(e) for e in np.eye(3)])


def _residual_jacobian(v, inertia, S=None):
    """Derivative of :func:`attitude_residual` with respect to ``v``, ``S = exp(v)``."""
    if S is None:
        S = lie.exp_so3(v)
    X = S @ _HAT_BASIS @ inertia.J_d
    D = X - X.transpose(0, 2, 1)
    # column i is vee(D[i])
    cols = np.stack([D[:, 2, 1], D[:, 0, 2], D[:, 1, 0]])
    return cols @ lie.dexp_matrix(v)


def _newton_log(Pi, inertia, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Solve the implicit attitude relation for ``v = log(S)``.

    Returns ``(v, iterations)``.
    """
    Pi = np.asarray(Pi, dtype=float)
    v = inertia.h * (inertia.M_inv @ Pi)
    for k in range(max_iter + 1):
        if not np.linalg.norm(v) < np.pi:
            break
        S = lie.exp_so3(v)
        r = attitude_residual(S, Pi, inertia)
        if np.max(np.abs(r)) <= tol:
            return v, k
        if k == max_iter:
            break
        J = _residual_jacobian(v, inertia, S)
        try:
            v = v - np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence(f"singular Newton Jacobian at Pi={Pi}") from exc
    raise NoConvergence(
        f"implicit attitude step did not converge for |Pi|={np.linalg.norm(Pi):.6g}, "
        f"h={inertia.h}; reduce the step length"
    )


def solve_relative_rotation(Pi, inertia, return_iterations=False):
    """Relative rotation ``S`` with ``hat(h Pi) = S J_d - J_d S^T``.

    Newton iteration on ``v = log(S)`` started from ``h M^{-1} Pi`` picks the
    root that is continuous in ``Pi`` with ``S(0) = I``.
    """
    v, k = _newton_log(Pi, inertia)
    S = lie.exp_so3(v)
    return (S, k) if return_iterations else S


def attitude_step(state, u, inertia):
    """One step ``R+ = R S``, ``Pi+ = S^T Pi + h u``."""
    S = solve_relative_rotation(state.Pi, inertia)
    Pi_next = S.T @ state.Pi + inertia.h * np.asarray(u, dtype=float)
    return AttitudeState(R=state.R @ S, Pi=Pi_next)


class AttitudePlant(Plant):
    """Discrete rigid-body attitude dynamics with body torque as control."""

    n = 3
    m = 3

    def __init__(self, inertia, derivative_method="implicit"):
        self.inertia = inertia
        self.derivative_method = derivative_method

    def step_log(self, t, q, x):
        return _newton_log(x, self.inertia)[0]

    def step_state(self, t, q, x, u):
        return self.step(t, q, x, u)[1]

    def step(self, t, q, x, u):
        x = np.asarray(x, dtype=float)
        v = _newton_log(x, self.inertia)[0]
        return v, lie.exp_so3(v).T @ x + self.inertia.h * np.asarray(u, dtype=float)

    def step_batch(self, t, q, x, u):
        Pi = np.asarray(x, dtype=float)
        inertia = self.inertia
        V = inertia.h * Pi @ inertia.M_inv.T
        for _ in range(NEWTON_MAX_ITER + 1):
            if not np.all(np.linalg.norm(V, axis=1) < np.pi):
                break
            S = lie.exp_so3_batch(V)
            A = S @ inertia.J_d
            D = A - A.transpose(0, 2, 1)
            r = np.stack([D[:, 2, 1], D[:, 0, 2], D[:, 1, 0]], axis=1) - inertia.h * Pi
            if np.max(np.abs(r)) <= NEWTON_TOL:
                S_T = S.transpose(0, 2, 1)
                return V, np.einsum("bij,bj->bi", S_T, Pi) + inertia.h * np.asarray(u, dtype=float)
            X = S[:, None] @ _HAT_BASIS[None] @ inertia.J_d
            DX = X - X.transpose(0, 1, 3, 2)
            cols = np.stack([DX[:, :, 2, 1], DX[:, :, 0, 2], DX[:, :, 1, 0]], axis=1)
            J = cols @ lie.dexp_matrix_batch(V)
            V = V - np.linalg.solve(J, r[..., None])[..., 0]
        raise NoConvergence("batched implicit attitude step did not converge; reduce the step length")

    def derivatives(self, t, q, x, u, method=None, phi=None):
        """Stage derivatives; ``phi`` may pass the already converged ``log S``."""
        method = method or self.derivative_method
        x = np.asarray(x, dtype=float)
        v = _newton_log(x, self.inertia)[0] if phi is None else np.asarray(phi, dtype=float)
        S = lie.exp_so3(v)
        h = self.inertia.h
        if method == "implicit":
            Jv = _residual_jacobian(v, self.inertia, S)
            try:
                Jinv = np.linalg.inv(Jv)
            except np.linalg.LinAlgError:
                Jinv = None
            if Jinv is None or np.linalg.norm(Jv, 1) * np.linalg.norm(Jinv, 1) > COND_MAX:
                raise SingularImplicitJacobian(f"implicit Jacobian singular at Pi={x}")
            phi_x = h * Jinv
            g_x = S.T + lie.hat(S.T @ x) @ lie.dexp_matrix(v) @ phi_x
        elif method == "fd":
            phi_x = np.zeros((3, 3))
            g_x = np.zeros((3, 3))
            for i in range(3):
                e = np.zeros(3)
                e[i] = FD_STEP
                vp = _newton_log(x + e, self.inertia)[0]
                vm = _newton_log(x - e, self.inertia)[0]
                phi_x[:, i] = (vp - vm) / (2 * FD_STEP)
                gp = lie.exp_so3(vp).T @ (x + e)
                gm = lie.exp_so3(vm).T @ (x - e)
                g_x[:, i] = (gp - gm) / (2 * FD_STEP)
        else:
            raise ValueError(f"unknown derivative method {method!r}")
        return StageDerivatives(
            phi=v,
            phi_q=np.zeros((3, 3)),
            phi_x=phi_x,
            g_q=np.zeros((3, 3)),
            g_x=g_x,
            g_u=h * np.eye(3),
        )

    def derivatives_batch(self, q, x, u, phi):
        if self.derivative_method != "implicit":
            return super().derivatives_batch(q, x, u, phi)
        N = len(u)
        V = np.asarray(phi, dtype=float)[:N]
        Pi = np.asarray(x, dtype=float)[:N]
        h = self.inertia.h
        S = lie.exp_so3_batch(V)
        dexp = lie.dexp_matrix_batch(V)
        X = S[:, None] @ _HAT_BASIS[None] @ self.inertia.J_d
        D = X - X.transpose(0, 1, 3, 2)
        # cols[t, :, i] = vee(D[t, i])
        cols = np.stack([D[:, :, 2, 1], D[:, :, 0, 2], D[:, :, 1, 0]], axis=1)
        Jv = cols @ dexp
        try:
            Jinv = np.linalg.inv(Jv)
        except np.linalg.LinAlgError as exc:
            raise SingularImplicitJacobian("implicit Jacobian singular along the trajectory") from exc
        cond = np.abs(Jv).sum(axis=1).max(axis=1) * np.abs(Jinv).sum(axis=1).max(axis=1)
        if not np.all(cond <= COND_MAX):
            t = int(np.argmax(~(cond <= COND_MAX)))
            raise SingularImplicitJacobian(f"implicit Jacobian singular at Pi={Pi[t]}")
        phi_x = h * Jinv
        St = S.transpose(0, 2, 1)
        g_x = St + lie.hat_batch(np.einsum("tij,tj->ti", St, Pi)) @ dexp @ phi_x
        zeros = np.zeros((3, 3))
        g_u = h * np.eye(3)
        return [
            StageDerivatives(phi=V[t], phi_q=zeros, phi_x=phi_x[t], g_q=zeros, g_x=g_x[t], g_u=g_u)
            for t in range(N)
        ]


def rollout(q0, x0, u, plant):
    """Propagate the plant from ``(q0, x0)`` under ``u`` (shape ``(N, m)``).

    Exceptions raised by the plant get a ``stage`` attribute naming the
    failing stage.
    """
    u = np.asarray(u, dtype=float).reshape(-1, plant.m)
    N = u.shape[0]
    q = np.empty((N + 1, 3, 3))
    x = np.empty((N + 1, plant.n))
    phi = np.empty((N, 3))
    q[0] = q0
    x[0] = x0
    for t in range(N):
        try:
            phi[t], x[t + 1] = plant.step(t, q[t], x[t], u[t])
        except Exception as exc:
            exc.stage = t
            raise
        q[t + 1] = q[t] @ lie.exp_so3(phi[t])
    return SystemTrajectory(q=q, x=x, phi=phi)


def rollout_batch(q0, x0, U, plant):
    """Propagate ``B`` control sequences ``U`` (``(B, N, m)``) from one initial state.

    Returns ``(q, x)`` with shapes ``(B, N+1, 3, 3)`` and ``(B, N+1, n)``.
    Agrees with :func:`rollout` to the Newton tolerance, not bitwise.
    """
    U = np.asarray(U, dtype=float)
    B, N = U.shape[:2]
    q = np.empty((B, N + 1, 3, 3))
    x = np.empty((B, N + 1, plant.n))
    q[:, 0] = q0
    x[:, 0] = x0
    for t in range(N):
        V, x[:, t + 1] = plant.step_batch(t, q[:, t], x[:, t], U[:, t])
        q[:, t + 1] = q[:, t] @ lie.exp_so3_batch(V)
    return q, x


def plant_derivatives(t, q, x, u, plant, **kwargs):
    """Derivative pack of ``plant`` at stage ``t``."""
    return plant.derivatives(t, q, x, u, **kwargs)
