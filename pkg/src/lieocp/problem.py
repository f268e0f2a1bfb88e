"""Problem data shared by the necessary-conditions code and the solver.

State constraints use the sign convention ``g_t(q_t, x_t) <= 0`` for
``t = 1..N``. A terminal target ``(q_f, x_f)`` is an equality
``e(q_N, x_N) = (log(q_f^T q_N), x_N - x_f) = 0``; for the necessary
conditions it is appended to ``g_N`` as the two inequality blocks
``e <= 0`` and ``-e <= 0``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .dynamics import Plant

__all__ = ["QuadraticControlCost", "ProblemSpec", "ConstraintEval"]


class QuadraticControlCost:
    """Stage cost ``weight/2 |u|^2`` and zero terminal cost."""

    def __init__(self, weight=1.0):
        self.weight = float(weight)

    def stage(self, t, q, x, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * self.weight * float(u @ u)

    def stage_grad(self, t, q, x, u):
        """Return ``(d/dq, d/dx, d/du)``; ``d/dq`` is left-trivialized."""
        u = np.asarray(u, dtype=float)
        return np.zeros(3), np.zeros(np.shape(x)), self.weight * u

    def terminal(self, q, x):
        return 0.0

    def terminal_grad(self, q, x):
        return np.zeros(3), np.zeros(np.shape(x))

    def change(self, traj0, u0, traj1, u1):
        """Total cost at ``u1`` minus total cost at ``u0``, without cancellation."""
        u0, u1 = np.asarray(u0, dtype=float), np.asarray(u1, dtype=float)
        return 0.5 * self.weight * float(np.sum((u1 - u0) * (u1 + u0)))


@dataclass
class ConstraintEval:
    """Values and Jacobians (``q`` left-trivialized) of a constraint block."""

    values: np.ndarray
    jac_q: np.ndarray
    jac_x: np.ndarray

    @property
    def size(self):
        return self.values.shape[0]


def _stack(blocks, n):
    blocks = [b for b in blocks if b.size]
    if not blocks:
        return ConstraintEval(np.zeros(0), np.zeros((0, 3)), np.zeros((0, n)))
    return ConstraintEval(
        np.concatenate([b.values for b in blocks]),
        np.vstack([b.jac_q for b in blocks]),
        np.vstack([b.jac_x for b in blocks]),
    )


@dataclass
class ProblemSpec:
    """Discrete optimal control problem on ``SO(3) x R^n``.

    Parameters
    ----------
    plant : Plant
    N : int
        Horizon; controls ``u_0..u_{N-1}``.
    q0, x0 :
        Initial state.
    u_lower, u_upper :
        Control box, broadcastable to ``(N, m)``.
    x_bound :
        Optional ``(n,)`` bound enforcing ``|x_t^(i)| <= x_bound[i]`` for
        ``t = 1..N``.
    target :
        Optional terminal target ``(q_f, x_f)``.
    freq :
        Optional :class:`~lieocp.spectrum.FrequencyConstraintSet`.
    cost :
        Object with ``stage``, ``stage_grad``, ``terminal`` and
        ``terminal_grad``; defaults to :class:`QuadraticControlCost`.
    """

    plant: Plant
    N: int
    q0: np.ndarray
    x0: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    x_bound: np.ndarray = None
    target: tuple = None
    freq: object = None
    cost: object = field(default_factory=QuadraticControlCost)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        m = self.plant.m
        self.q0 = np.asarray(self.q0, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.plant.n)
        self.u_lower = np.broadcast_to(np.asarray(self.u_lower, dtype=float), (self.N, m)).copy()
        self.u_upper = np.broadcast_to(np.asarray(self.u_upper, dtype=float), (self.N, m)).copy()
        if np.any(self.u_lower > self.u_upper):
            raise ValueError("empty control box")
        if self.x_bound is not None:
            self.x_bound = np.asarray(self.x_bound, dtype=float).reshape(self.plant.n)
        if self.target is not None:
            qf, xf = self.target
            self.target = (np.asarray(qf, dtype=float), np.asarray(xf, dtype=float).reshape(self.plant.n))
        if self.freq is not None:
            if self.freq.N != self.N or self.freq.m != m:
                raise ValueError("frequency constraint set does not match (N, m)")
            if self.freq.is_empty:
                self.freq = None

    @property
    def n(self):
        return self.plant.n

    @property
    def m(self):
        return self.plant.m

    @property
    def ell(self):
        return 0 if self.freq is None else self.freq.ell

    def F(self, t):
        """Frequency matrix of stage ``t`` (``(ell, m)``)."""
        if self.freq is None:
            return np.zeros((0, self.m))
        return self.freq.F[t]

    # -- state constraints -------------------------------------------------

    def inequality(self, t, q, x):
        """Inequality block ``g_t(q, x) <= 0`` for ``1 <= t <= N``."""
        n = self.n
        if self.x_bound is None:
            return ConstraintEval(np.zeros(0), np.zeros((0, 3)), np.zeros((0, n)))
        x = np.asarray(x, dtype=float)
        eye = np.eye(n)
        return ConstraintEval(
            values=np.concatenate([x - self.x_bound, -x - self.x_bound]),
            jac_q=np.zeros((2 * n, 3)),
            jac_x=np.vstack([eye, -eye]),
        )

    def terminal_equality(self, q, x):
        """Terminal equality block ``e(q, x)``; empty without a target."""
        n = self.n
        if self.target is None:
            return ConstraintEval(np.zeros(0), np.zeros((0, 3)), np.zeros((0, n)))
        qf, xf = self.target
        err = lie.log_so3(qf.T @ q)
        jac_q = np.zeros((3 + n, 3))
        jac_q[:3] = lie.dexp_inv_matrix(err)
        jac_x = np.zeros((3 + n, n))
        jac_x[3:] = np.eye(n)
        values = np.concatenate([err, np.asarray(x, dtype=float) - xf])
        return ConstraintEval(values, jac_q, jac_x)

    def constraints(self, t, q, x):
        """Constraint block ``g_t`` as it enters the necessary conditions.

        For ``t < N`` this is :meth:`inequality`; at ``t = N`` the terminal
        equality ``e`` is appended as ``[e; -e]``.
        """
        g = self.inequality(t, q, x)
        if t < self.N:
            return g
        e = self.terminal_equality(q, x)
        neg = ConstraintEval(-e.values, -e.jac_q, -e.jac_x)
        return _stack([g, e, neg], self.n)

    def n_inequality(self, t):
        return 0 if self.x_bound is None else 2 * self.n

    def n_equality(self):
        return 0 if self.target is None else 3 + self.n

    # -- costs ----------------------------------------------------------------

    def total_cost(self, traj, u):
        u = np.asarray(u, dtype=float)
        c = 0.0
        for t in range(self.N):
            c += self.cost.stage(t, traj.q[t], traj.x[t], u[t])
        return c + self.cost.terminal(traj.q[self.N], traj.x[self.N])

    def cost_change(self, traj0, u0, traj1, u1):
        """``total_cost(traj1, u1) - total_cost(traj0, u0)``.

        Uses ``cost.change`` when the cost provides it; near a minimizer the
        difference of two large totals loses most of its digits.
        """
        if hasattr(self.cost, "change"):
            return self.cost.change(traj0, u0, traj1, u1)
        u0, u1 = np.asarray(u0, dtype=float), np.asarray(u1, dtype=float)
        d = 0.0
        for t in range(self.N):
            d += (self.cost.stage(t, traj1.q[t], traj1.x[t], u1[t])
                  - self.cost.stage(t, traj0.q[t], traj0.x[t], u0[t]))
        N = self.N
        return d + self.cost.terminal(traj1.q[N], traj1.x[N]) - self.cost.terminal(traj0.q[N], traj0.x[N])

    def box_violation(self, u):
        u = np.asarray(u, dtype=float)
        return float(max(np.max(u - self.u_upper), np.max(self.u_lower - u), 0.0))
