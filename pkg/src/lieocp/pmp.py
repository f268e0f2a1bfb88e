"""First-order necessary conditions for frequency-constrained problems on SO(3).

The Hamiltonian of stage ``t`` is

    H = eta_c c_t(q, x, u) + <xi, log f_t(q, x)> + <lam, g_t(q, x, u)>
        + <eta_f, F_t u>

and an extremal carries multipliers ``xi_t, lam_t`` (``t = 0..N-1``), state
constraint covectors ``mu_t <= 0`` (``t = 1..N``), ``eta_c in {-1, 0}`` and a
frequency multiplier ``eta_f``. The group adjoint recursion runs on
``rho_t = dexp_inv_dual(phi_t, xi_t)`` where ``phi_t = log f_t``:

    rho_{t-1} = D_q H_t + mu_t D_q g_t + Ad*_{exp(-phi_t)} rho_t
    lam_{t-1} = D_x H_t + mu_t D_x g_t

with ``rho_{N-1}, lam_{N-1}`` fixed by the terminal cost and ``g_N``. With
``eta_c = -1`` and ``eta_f = 0``, ``-dH/du`` is the gradient of
``sum c_t + c_N - sum mu_t . g_t`` with respect to the controls.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .errors import UNotInBox

__all__ = [
    "AdjointBundle",
    "KKTReport",
    "DEFAULT_TOLERANCES",
    "stage_derivatives",
    "hamiltonian",
    "hamiltonian_du",
    "adjoint_backward",
    "gradient_condition_residual",
    "kkt_check",
]

DEFAULT_TOLERANCES = {
    "state_dynamics": 1e-6,
    "adjoint": 1e-6,
    "transversality": 1e-6,
    "gradient": 1e-6,
    "slackness": 1e-6,
    "nonpositivity": 1e-8,
    "nontriviality": 1e-12,
}

BOX_TOL = 1e-9


@dataclass(eq=False)
class AdjointBundle:
    """Multipliers of an extremal.

    ``mu[t - 1]`` holds the covector of stage ``t`` (``t = 1..N``); its length
    follows ``problem.constraints(t, ...)``. ``rho`` and ``dH_du`` are derived
    quantities kept for convenience.
    """

    xi: np.ndarray
    lam: np.ndarray
    mu: list
    eta_c: float
    eta_f: np.ndarray
    rho: np.ndarray = None
    dH_du: np.ndarray = None

    def scaled(self, s):
        """All multipliers multiplied by ``s > 0``."""
        return AdjointBundle(
            xi=s * self.xi,
            lam=s * self.lam,
            mu=[s * m for m in self.mu],
            eta_c=s * self.eta_c,
            eta_f=s * self.eta_f,
            rho=None if self.rho is None else s * self.rho,
            dH_du=None if self.dH_du is None else s * self.dH_du,
        )


@dataclass
class KKTReport:
    """Residuals of the necessary conditions and their verdicts.

    Residual keys: ``state_dynamics`` and ``adjoint`` (condition ii),
    ``transversality`` (iii), ``gradient`` (iv), ``slackness`` (v),
    ``nonpositivity`` (vi) and ``nontriviality`` (i). Every residual is a
    defect that must stay below its tolerance except ``nontriviality``,
    which is a norm that must exceed it.
    """

    residuals: dict
    tolerances: dict
    eta_c: float
    passed: dict = field(init=False)

    def __post_init__(self):
        self.passed = {}
        for key, value in self.residuals.items():
            tol = self.tolerances[key]
            self.passed[key] = bool(value > tol) if key == "nontriviality" else bool(value <= tol)

    @property
    def ok(self):
        return all(self.passed.values())

    def to_dict(self):
        """Flat ``key -> number`` document."""
        out = {"eta_c": float(self.eta_c), "pass": int(self.ok)}
        for key, value in self.residuals.items():
            out[f"residual.{key}"] = float(value)
            out[f"tolerance.{key}"] = float(self.tolerances[key])
            out[f"pass.{key}"] = int(self.passed[key])
        return out

    @classmethod
    def from_dict(cls, doc):
        keys = [k.split(".", 1)[1] for k in doc if k.startswith("residual.")]
        return cls(
            residuals={k: doc[f"residual.{k}"] for k in keys},
            tolerances={k: doc[f"tolerance.{k}"] for k in keys},
            eta_c=doc["eta_c"],
        )


def stage_derivatives(traj, u, problem):
    """Plant derivative packs for every stage of ``traj``."""
    u = np.asarray(u, dtype=float)
    return problem.plant.derivatives_batch(traj.q, traj.x, u, traj.phi)


def hamiltonian(xi, lam, t, q, x, u, eta_c, eta_f, problem):
    """Value of the stage-``t`` Hamiltonian."""
    plant = problem.plant
    phi, x_next = plant.step(t, q, x, u)
    value = eta_c * problem.cost.stage(t, q, x, u) + float(np.dot(xi, phi))
    value += float(np.dot(lam, x_next))
    if problem.ell:
        value += float(np.dot(eta_f, problem.F(t) @ np.asarray(u, dtype=float)))
    return value


def hamiltonian_du(xi, lam, t, q, x, u, eta_c, eta_f, problem, deriv=None):
    """``dH/du`` at stage ``t`` (the group step does not depend on ``u``)."""
    if deriv is None:
        deriv = problem.plant.derivatives(t, q, x, u)
    _, _, c_u = problem.cost.stage_grad(t, q, x, u)
    out = eta_c * c_u + deriv.g_u.T @ lam
    if problem.ell:
        out = out + problem.F(t).T @ eta_f
    return out


def _stage_partials(t, traj, u, xi, lam, eta_c, deriv, problem):
    """``D_q H_t`` (left-trivialized) and ``D_x H_t``."""
    c_q, c_x, _ = problem.cost.stage_grad(t, traj.q[t], traj.x[t], u[t])
    Hq = eta_c * c_q + deriv.phi_q.T @ xi + deriv.g_q.T @ lam
    Hx = eta_c * c_x + deriv.phi_x.T @ xi + deriv.g_x.T @ lam
    return Hq, Hx


def _terminal_adjoint(traj, mu_N, eta_c, problem):
    N = traj.N
    qN, xN = traj.q[N], traj.x[N]
    cq, cx = problem.cost.terminal_grad(qN, xN)
    g = problem.constraints(N, qN, xN)
    return eta_c * cq + g.jac_q.T @ mu_N, eta_c * cx + g.jac_x.T @ mu_N


def adjoint_backward(traj, u, mu, eta_c, eta_f, problem, derivs=None):
    """Run the backward adjoint recursion along ``traj``.

    Parameters
    ----------
    traj : SystemTrajectory
        Trajectory generated by ``u``.
    mu : list of arrays
        ``mu[t - 1]`` for ``t = 1..N``.
    eta_c : float
    eta_f : array of length ``problem.ell``
    derivs : list of StageDerivatives, optional
        Reused when given.

    Returns
    -------
    AdjointBundle
        Includes ``rho`` and the control gradient ``dH_du``.
    """
    u = np.asarray(u, dtype=float)
    N, n = traj.N, problem.n
    if derivs is None:
        derivs = stage_derivatives(traj, u, problem)
    eta_f = np.zeros(problem.ell) if eta_f is None else np.asarray(eta_f, dtype=float)
    rho = np.zeros((N, 3))
    xi = np.zeros((N, 3))
    lam = np.zeros((N, n))
    dH_du = np.zeros((N, problem.m))

    phis = np.array([d.phi for d in derivs])
    dexp_T = lie.dexp_matrix_batch(phis).transpose(0, 2, 1)
    steps = lie.exp_so3_batch(phis)
    rho[N - 1], lam[N - 1] = _terminal_adjoint(traj, mu[N - 1], eta_c, problem)
    for t in range(N - 1, -1, -1):
        d = derivs[t]
        xi[t] = dexp_T[t] @ rho[t]
        dH_du[t] = hamiltonian_du(xi[t], lam[t], t, traj.q[t], traj.x[t], u[t], eta_c, eta_f, problem, d)
        if t == 0:
            break
        Hq, Hx = _stage_partials(t, traj, u, xi[t], lam[t], eta_c, d, problem)
        g = problem.constraints(t, traj.q[t], traj.x[t])
        rho[t - 1] = Hq + g.jac_q.T @ mu[t - 1] + lie.coadjoint(steps[t], rho[t])
        lam[t - 1] = Hx + g.jac_x.T @ mu[t - 1]
    return AdjointBundle(
        xi=xi, lam=lam, mu=[np.asarray(m, dtype=float) for m in mu],
        eta_c=float(eta_c), eta_f=eta_f, rho=rho, dH_du=dH_du,
    )


def gradient_condition_residual(u_t, dHdu_t, lower, upper, tol=BOX_TOL):
    """Fixed-point residual ``|u - clip(u + dH/du)|_inf`` of the gradient condition.

    Zero exactly when ``<dH/du, w - u> <= 0`` for every ``w`` in the box.
    """
    u_t = np.asarray(u_t, dtype=float)
    lower = np.broadcast_to(lower, u_t.shape)
    upper = np.broadcast_to(upper, u_t.shape)
    if np.any(u_t > upper + tol) or np.any(u_t < lower - tol):
        raise UNotInBox(f"control {u_t} outside [{lower}, {upper}]")
    if u_t.size == 0:
        return 0.0
    return float(np.max(np.abs(u_t - np.clip(u_t + dHdu_t, lower, upper))))


def zero_mu(problem, traj):
    """Zero state-constraint covectors shaped for ``problem``."""
    return [np.zeros(problem.constraints(t, traj.q[t], traj.x[t]).size) for t in range(1, traj.N + 1)]


def kkt_check(traj, u, bundle, problem, tolerances=None, derivs=None):
    """Evaluate every necessary condition on ``(traj, u, bundle)``.

    Never raises on a violated condition; the verdicts live in the report.
    The control gradient is recomputed from ``xi``, ``lam`` and ``eta_f``
    rather than read from ``bundle.dH_du``.
    """
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    u = np.asarray(u, dtype=float)
    N = traj.N
    plant = problem.plant
    if derivs is None:
        derivs = stage_derivatives(traj, u, problem)
    eta_c, eta_f = bundle.eta_c, np.asarray(bundle.eta_f, dtype=float)

    dyn = 0.0
    for t in range(N):
        phi, x_next = plant.step(t, traj.q[t], traj.x[t], u[t])
        step = traj.q[t] @ lie.exp_so3(phi)
        dyn = max(
            dyn,
            float(np.max(np.abs(step - traj.q[t + 1]))),
            float(np.max(np.abs(x_next - traj.x[t + 1]))) if x_next.size else 0.0,
        )

    rho = np.array([lie.dexp_inv_dual(derivs[t].phi, bundle.xi[t]) for t in range(N)])
    rho_N, lam_N = _terminal_adjoint(traj, bundle.mu[N - 1], eta_c, problem)
    trans = float(max(np.max(np.abs(rho[N - 1] - rho_N)), np.max(np.abs(bundle.lam[N - 1] - lam_N), initial=0.0)))

    adj = 0.0
    grad = 0.0
    slack = 0.0
    nonpos = 0.0
    for t in range(N):
        d = derivs[t]
        if t >= 1:
            Hq, Hx = _stage_partials(t, traj, u, bundle.xi[t], bundle.lam[t], eta_c, d, problem)
            g = problem.constraints(t, traj.q[t], traj.x[t])
            f = lie.exp_so3(d.phi)
            r_q = Hq + g.jac_q.T @ bundle.mu[t - 1] + lie.coadjoint(f, rho[t]) - rho[t - 1]
            r_x = Hx + g.jac_x.T @ bundle.mu[t - 1] - bundle.lam[t - 1]
            adj = max(adj, float(np.max(np.abs(r_q))), float(np.max(np.abs(r_x), initial=0.0)))
        dHdu = hamiltonian_du(bundle.xi[t], bundle.lam[t], t, traj.q[t], traj.x[t], u[t], eta_c, eta_f, problem, d)
        grad = max(grad, gradient_condition_residual(u[t], dHdu, problem.u_lower[t], problem.u_upper[t]))
    for t in range(1, N + 1):
        g = problem.constraints(t, traj.q[t], traj.x[t])
        mu = np.asarray(bundle.mu[t - 1], dtype=float)
        if mu.size:
            slack = max(slack, float(np.max(np.abs(mu * g.values))))
            nonpos = max(nonpos, float(np.max(mu)))

    nontriv = float(np.sqrt(
        np.sum(bundle.lam**2) + np.sum(bundle.xi**2) + eta_c**2 + np.sum(eta_f**2)
    ))
    residuals = {
        "state_dynamics": dyn,
        "adjoint": adj,
        "transversality": trans,
        "gradient": grad,
        "slackness": slack,
        "nonpositivity": max(nonpos, 0.0),
        "nontriviality": nontriv,
    }
    return KKTReport(residuals=residuals, tolerances=tol, eta_c=eta_c)
