"""Direct synthesis of extremals by an augmented Lagrangian method.

State inequalities and the terminal target are handled by the augmented
Lagrangian; the gradient of its merit function is the control gradient of
the Hamiltonian computed by :func:`lieocp.pmp.adjoint_backward`. The
default inner solver is L-BFGS-B on the control box, with the frequency
equality carried as one more augmented Lagrangian block. The alternative
projected-gradient inner solver keeps every iterate inside the box and the
frequency null space through :func:`project_feasible`.

A run is declared converged only at a point that has been restored to
feasibility and whose fitted multipliers pass :func:`lieocp.pmp.kkt_check`.

Sign bridge: the augmented Lagrangian keeps multipliers ``nu >= 0`` for
``g <= 0`` and free ``nu_eq`` for the terminal equality. The covectors of
the necessary conditions are ``mu = -nu`` and, for the two-sided terminal
rows ``[e; -e]``, ``(-max(nu_eq, 0), -max(-nu_eq, 0))``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import lie
from .dynamics import rollout
from .errors import Infeasible, MaxIterations, PlantFailure, ProjectionStall
from .pmp import adjoint_backward, kkt_check, stage_derivatives
from .spectrum import project_onto_nullspace, spectrum

__all__ = [
    "SolverOptions",
    "SolveResult",
    "project_feasible",
    "solve",
    "recover_multipliers",
    "estimate_multipliers",
    "constraint_violations",
    "constraint_scales",
    "restore_feasibility",
]

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    max_outer: int = 60
    max_inner: int = 3000
    grad_tol: float = 1e-5
    inner_tol0: float = 1e-1
    feas_tol: float = 1e-6
    comp_tol: float = 1e-5
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    stall_outer: int = 5
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    step_min: float = 1e-6
    step_max: float = 1e2
    proj_tol: float = 1e-13
    proj_max_sweeps: int = 2000
    proj_method: str = "newton"
    active_tol: float = 1e-7
    restore_threshold: float = 1e-3
    inner_method: str = "lbfgsb"
    lbfgs_memory: int = 30
    kkt_tolerances: dict = field(default_factory=lambda: {
        "state_dynamics": 1e-6, "adjoint": 1e-4, "transversality": 1e-4,
        "gradient": 1e-4, "slackness": 1e-4, "nonpositivity": 1e-4, "nontriviality": 1e-12,
    })
    seed: int = 0
    init_noise: float = 0.0
    raise_on_failure: bool = True


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Solution, its multipliers, certificate and independent violation numbers."""

    u: np.ndarray
    traj: object
    bundle: object
    report: object
    cost: float
    violations: dict
    iterations: dict
    converged: bool
    al_state: dict
    history: dict = field(default_factory=dict, repr=False)


# -- projection ---------------------------------------------------------------

def _box_gap(x, lower, upper):
    return float(max(np.max(x - upper), np.max(lower - x), 0.0))


def _dykstra(u, lower, upper, C, tol, max_sweeps):
    x = u.copy()
    p = np.zeros_like(u)
    q = np.zeros_like(u)
    for sweep in range(1, max_sweeps + 1):
        y = np.clip(x + p, lower, upper)
        p = x + p - y
        x_new = project_onto_nullspace(y + q, C)
        q = y + q - x_new
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change < tol and _box_gap(x, lower, upper) <= 10 * tol:
            return x, sweep
    raise ProjectionStall(
        f"Dykstra projection did not settle in {max_sweeps} sweeps "
        f"(box violation {_box_gap(x, lower, upper):.3g}, "
        f"frequency residual {float(np.max(np.abs(C.apply(x)))):.3g})",
        box_violation=_box_gap(x, lower, upper),
        freq_violation=float(np.max(np.abs(C.apply(x)))),
    )


DUAL_DAMPING = 1e-6


def _exact_dual_step(z, w, lo, hi):
    """Maximizer ``s >= 0`` of the dual along a direction.

    The directional derivative is ``phi(s) = sum_i w_i clip(z_i - s w_i)``,
    nonincreasing and piecewise linear in ``s``; its root is bracketed
    between consecutive breakpoints and found by interpolation.
    """
    def phi(s):
        return float(w @ np.clip(z - s * w, lo, hi))

    nz = w != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = np.concatenate([(z[nz] - lo[nz]) / w[nz], (z[nz] - hi[nz]) / w[nz]])
    bps = np.unique(cand[np.isfinite(cand) & (cand > 0.0)])
    if phi(0.0) <= 0.0:
        return 0.0
    # bisection over the sorted breakpoints for the first one with phi <= 0
    lo_i, hi_i = -1, bps.size
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if phi(bps[mid]) > 0.0:
            lo_i = mid
        else:
            hi_i = mid
    s0 = 0.0 if lo_i < 0 else bps[lo_i]
    if hi_i == bps.size:
        # phi is constant and positive past the last breakpoint: unbounded dual
        return np.inf
    s1 = bps[hi_i]
    p0, p1 = phi(s0), phi(s1)
    return s1 if p0 == p1 else s0 + (s1 - s0) * p0 / (p0 - p1)


def _dual_newton(u, lower, upper, C, tol, max_iter, eta0=None):
    """Semismooth Newton on the dual of the projection problem.

    The projection is ``clip(u - A^T eta)`` for the ``eta`` that maximizes the
    concave, piecewise quadratic dual whose gradient is
    ``A clip(u - A^T eta)``. Steps use an exact line search, so a single
    iteration may cross many clip breakpoints.
    """
    A = C.matrix
    y = u.reshape(-1)
    lo, hi = lower.reshape(-1), upper.reshape(-1)
    if eta0 is None:
        # multiplier of the projection without the box
        eta = np.linalg.solve(A @ A.T, A @ y)
    else:
        eta = np.array(eta0, dtype=float)
    x = np.clip(y - A.T @ eta, lo, hi)
    # free components inherit the rounding of y - A^T eta
    tol = max(tol, 64 * np.finfo(float).eps * float(np.max(np.abs(y), initial=1.0)))
    for it in range(1, max_iter + 1):
        grad = A @ x
        if np.max(np.abs(grad)) <= tol:
            return x.reshape(u.shape), it, eta
        z = y - A.T @ eta
        free = (z > lo) & (z < hi)
        # damping tied to the residual keeps the step finite when fewer
        # components are free than there are rows
        H = A[:, free] @ A[:, free].T
        H[np.diag_indices_from(H)] += DUAL_DAMPING * np.linalg.norm(grad)
        d = np.linalg.solve(H, grad)
        step = _exact_dual_step(z, A.T @ d, lo, hi)
        if not np.isfinite(step):
            raise ProjectionStall("box and frequency constraints have no common point")
        eta = eta + step * d
        x = np.clip(y - A.T @ eta, lo, hi)
    grad = A @ x
    raise ProjectionStall(
        f"dual Newton projection did not converge (frequency residual {np.max(np.abs(grad)):.3g})",
        box_violation=0.0,
        freq_violation=float(np.max(np.abs(grad))),
    )


def project_feasible(u, lower, upper, C, tol=1e-10, max_sweeps=500, method="dykstra",
                     return_info=False, warm=None):
    """Project ``u`` onto ``box ∩ {sum_t F_t u_t = 0}``.

    ``method="dykstra"`` alternates a box clip with the exact null-space
    projection until successive iterates differ by less than ``tol``.
    ``method="newton"`` solves the dual of the projection problem by
    semismooth Newton; its output lies in the box exactly and in the null
    space to ``tol``. For this method ``max_sweeps`` caps Newton steps and
    ``warm`` (a dict) carries the dual variable between calls.

    Raises
    ------
    ProjectionStall
        If the iteration cap is reached.
    """
    u = np.asarray(u, dtype=float)
    lower = np.broadcast_to(lower, u.shape)
    upper = np.broadcast_to(upper, u.shape)
    if C is None or C.is_empty:
        out = np.clip(u, lower, upper)
        return (out, {"iterations": 0}) if return_info else out
    if method == "dykstra":
        out, k = _dykstra(u, lower, upper, C, tol, max_sweeps)
    elif method == "newton":
        eta0 = None if warm is None else warm.get("eta")
        out, k, eta = _dual_newton(u, lower, upper, C, tol, max_sweeps, eta0)
        if warm is not None:
            warm["eta"] = eta
    else:
        raise ValueError(f"unknown projection method {method!r}")
    return (out, {"iterations": k}) if return_info else out


# -- augmented Lagrangian bookkeeping -----------------------------------------

def _rollout(problem, u):
    try:
        return rollout(problem.q0, problem.x0, u, problem.plant)
    except Exception as exc:
        raise PlantFailure(getattr(exc, "stage", None), exc) from exc


class _Merit:
    """Augmented Lagrangian merit for fixed multipliers and penalties.

    ``penalty_ineq`` is a scalar shared by all state inequalities;
    ``penalty_eq`` holds one penalty per terminal equality row.
    """

    def __init__(self, problem, nu_ineq, nu_eq, penalty_ineq, penalty_eq, eta_f=None, penalty_f=0.0):
        self.problem = problem
        self.nu_ineq = nu_ineq
        self.nu_eq = nu_eq
        self.penalty_ineq = float(penalty_ineq)
        self.penalty_eq = np.asarray(penalty_eq, dtype=float)
        # frequency block, only when the inner solver does not project onto it
        self.eta_f = eta_f
        self.penalty_f = float(penalty_f)

    def evaluate(self, u, with_grad=True, traj=None):
        """``(value, traj, gradient)``; pass ``traj`` to reuse a rollout of ``u``."""
        P = self.problem
        rho = self.penalty_ineq
        if traj is None:
            traj = _rollout(P, u)
        value = P.total_cost(traj, u)
        mu = []
        for t in range(1, P.N + 1):
            g = P.inequality(t, traj.q[t], traj.x[t]).values
            nu = self.nu_ineq[t - 1]
            shifted = np.maximum(0.0, nu + rho * g)
            value += float(np.sum(shifted**2 - nu**2)) / (2.0 * rho)
            block = [-shifted]
            if t == P.N and P.n_equality():
                e = P.terminal_equality(traj.q[t], traj.x[t]).values
                value += float(self.nu_eq @ e) + 0.5 * float(self.penalty_eq @ (e * e))
                eff = self.nu_eq + self.penalty_eq * e
                block += [-np.maximum(eff, 0.0), -np.maximum(-eff, 0.0)]
            mu.append(np.concatenate(block))
        if self.eta_f is not None:
            w = P.freq.apply(u)
            value += float(self.eta_f @ w) + 0.5 * self.penalty_f * float(w @ w)
        if not with_grad:
            return value, traj, None
        grad = -adjoint_backward(traj, u, mu, -1.0, None, P).dH_du
        if self.eta_f is not None:
            grad = grad + P.freq.adjoint_apply(self.eta_f + self.penalty_f * w)
        return value, traj, grad

    def change(self, u0, traj0, u1, traj1):
        """Merit at ``u1`` minus merit at ``u0``, accumulated term by term.

        Each penalty term is differenced through the constraint change, so
        the result keeps its relative accuracy when the two merit values
        agree to many digits.
        """
        P = self.problem
        rho = self.penalty_ineq
        d = P.cost_change(traj0, u0, traj1, u1)
        for t in range(1, P.N + 1):
            g0 = P.inequality(t, traj0.q[t], traj0.x[t]).values
            if g0.size:
                g1 = P.inequality(t, traj1.q[t], traj1.x[t]).values
                nu = self.nu_ineq[t - 1]
                a0, a1 = nu + rho * g0, nu + rho * g1
                s0, s1 = np.maximum(a0, 0.0), np.maximum(a1, 0.0)
                ds = np.where((a0 > 0.0) & (a1 > 0.0), rho * (g1 - g0), s1 - s0)
                d += float(np.sum(ds * (s1 + s0))) / (2.0 * rho)
        if P.n_equality():
            N = P.N
            e0 = P.terminal_equality(traj0.q[N], traj0.x[N]).values
            e1 = P.terminal_equality(traj1.q[N], traj1.x[N]).values
            de = e1 - e0
            d += float(self.nu_eq @ de) + 0.5 * float(self.penalty_eq @ (de * (e1 + e0)))
        if self.eta_f is not None:
            dw = P.freq.apply(np.asarray(u1) - np.asarray(u0))
            w_sum = P.freq.apply(u1) + P.freq.apply(u0)
            d += float(self.eta_f @ dw) + 0.5 * self.penalty_f * float(dw @ w_sum)
        return d


def _violations_raw(problem, traj):
    ineq = 0.0
    for t in range(1, problem.N + 1):
        g = problem.inequality(t, traj.q[t], traj.x[t]).values
        if g.size:
            ineq = max(ineq, float(np.max(g)))
    eq = 0.0
    if problem.n_equality():
        e = problem.terminal_equality(traj.q[problem.N], traj.x[problem.N]).values
        eq = float(np.max(np.abs(e)))
    return max(ineq, 0.0), eq


def constraint_violations(problem, u, traj=None):
    """Constraint violations of ``u`` recomputed from scratch."""
    u = np.asarray(u, dtype=float)
    if traj is None:
        traj = rollout(problem.q0, problem.x0, u, problem.plant)
    N = problem.N
    out = {"box": problem.box_violation(u)}
    ineq, _ = _violations_raw(problem, traj)
    out["state_constraint"] = ineq
    if problem.target is not None:
        qf, xf = problem.target
        out["terminal_attitude"] = float(np.linalg.norm(lie.log_so3(qf.T @ traj.q[N])))
        out["terminal_state"] = float(np.linalg.norm(traj.x[N] - xf))
    else:
        out["terminal_attitude"] = 0.0
        out["terminal_state"] = 0.0
    if problem.freq is not None:
        spec = spectrum(u)
        worst = 0.0
        for ch, bins in problem.freq.forbidden().items():
            idx = np.asarray(bins) - 1
            worst = max(worst, float(np.max(np.abs(spec[idx, ch - 1]))))
        out["forbidden_bin"] = worst
        out["frequency_residual"] = float(np.max(np.abs(problem.freq.apply(u))))
    else:
        out["forbidden_bin"] = 0.0
        out["frequency_residual"] = 0.0
    return out


# -- multipliers ----------------------------------------------------------------

def _two_sided(nu_eq):
    return np.concatenate([-np.maximum(nu_eq, 0.0), -np.maximum(-nu_eq, 0.0)])


def _fit_multipliers(G0, B, lb, ub, u, lower, upper, active_tol):
    """Fit ``z`` so that ``u = clip(u + G0 + B z)`` as closely as possible.

    On free components ``a = G0 + B z`` should vanish; on a component at its
    upper (lower) bound only a negative (positive) ``a`` is a defect. The
    one-sided defects enter through nonnegative slacks ``s`` because
    ``min_{s >= 0} (a - s)^2 = max(-a, 0)^2``, so the fit is one bounded
    linear least-squares problem. ``lb <= z <= ub`` is respected.
    """
    g0, uf, lo, hi = G0.reshape(-1), u.reshape(-1), lower.reshape(-1), upper.reshape(-1)
    K = B.shape[1]
    if K == 0:
        return np.zeros(0)
    lb, ub = np.broadcast_to(lb, (K,)), np.broadcast_to(ub, (K,))
    at_hi = uf >= hi - active_tol
    at_lo = ~at_hi & (uf <= lo + active_tol)
    idx_hi, idx_lo = np.flatnonzero(at_hi), np.flatnonzero(at_lo)
    S = np.zeros((uf.size, idx_hi.size + idx_lo.size))
    S[idx_hi, np.arange(idx_hi.size)] = -1.0
    S[idx_lo, idx_hi.size + np.arange(idx_lo.size)] = 1.0
    A = np.hstack([B, S])
    lower_z = np.concatenate([lb, np.zeros(S.shape[1])])
    upper_z = np.concatenate([ub, np.full(S.shape[1], np.inf)])
    if np.all(np.isinf(lower_z)) and np.all(np.isinf(upper_z)):
        return np.linalg.lstsq(A, -g0, rcond=None)[0][:K]
    sol = scipy.optimize.lsq_linear(A, -g0, bounds=(lower_z, upper_z), method="bvls", tol=1e-14)
    return sol.x[:K]


def recover_multipliers(problem, traj, u, nu_ineq, nu_eq, derivs=None, active_tol=1e-7):
    """Multipliers of the necessary conditions from a converged AL state.

    ``mu`` comes from the AL multipliers through the sign bridge,
    ``eta_c = -1``, and ``eta_f`` is the least-squares frequency multiplier
    that makes the gradient condition hold on the free control components.
    """
    N = problem.N
    if derivs is None:
        derivs = stage_derivatives(traj, u, problem)
    mu = []
    for t in range(1, N + 1):
        block = [-np.asarray(nu_ineq[t - 1], dtype=float)]
        if t == N and problem.n_equality():
            block.append(_two_sided(np.asarray(nu_eq, dtype=float)))
        mu.append(np.concatenate(block))
    bundle = adjoint_backward(traj, u, mu, -1.0, None, problem, derivs)
    if problem.ell:
        B = problem.freq.matrix.T
        eta_f = _fit_multipliers(
            bundle.dH_du, B, -np.inf, np.inf, u, problem.u_lower, problem.u_upper, active_tol
        )
        bundle.eta_f = eta_f
        bundle.dH_du = bundle.dH_du + problem.freq.adjoint_apply(eta_f)
    return bundle


def estimate_multipliers(problem, traj, u, derivs=None, active_tol=1e-5):
    """Multipliers fitted from the trajectory alone.

    Uses only ``(traj, u)``: state constraints with ``g >= -active_tol`` are
    treated as possibly active, and nonnegative inequality multipliers, a
    free terminal multiplier and ``eta_f`` are fitted by bounded least
    squares on the gradient condition. ``eta_c = -1``.
    """
    u = np.asarray(u, dtype=float)
    N, m = problem.N, problem.m
    if derivs is None:
        derivs = stage_derivatives(traj, u, problem)
    sizes = [problem.n_inequality(t) for t in range(1, N + 1)]
    n_eq = problem.n_equality()
    zero_mu = [np.zeros(sizes[t - 1] + (2 * n_eq if t == N else 0)) for t in range(1, N + 1)]
    base = adjoint_backward(traj, u, zero_mu, -1.0, None, problem, derivs)

    columns, lb, tags = [], [], []
    for t in range(1, N + 1):
        g = problem.inequality(t, traj.q[t], traj.x[t]).values
        for j in np.flatnonzero(g >= -active_tol):
            mu = [z.copy() for z in zero_mu]
            mu[t - 1][j] = -1.0
            columns.append(adjoint_backward(traj, u, mu, 0.0, None, problem, derivs).dH_du.reshape(-1))
            lb.append(0.0)
            tags.append(("ineq", t, j))
    off = sizes[N - 1]
    for j in range(n_eq):
        mu = [z.copy() for z in zero_mu]
        mu[N - 1][off + j] = -1.0
        columns.append(adjoint_backward(traj, u, mu, 0.0, None, problem, derivs).dH_du.reshape(-1))
        lb.append(-np.inf)
        tags.append(("eq", N, j))
    if problem.ell:
        for k in range(problem.ell):
            columns.append(problem.freq.F[:, k, :].reshape(-1))
            lb.append(-np.inf)
            tags.append(("freq", None, k))
    B = np.column_stack(columns) if columns else np.zeros((N * m, 0))
    lb = np.asarray(lb, dtype=float)
    z = _fit_multipliers(base.dH_du, B, lb, np.full(lb.shape, np.inf), u,
                         problem.u_lower, problem.u_upper, 1e-7)

    nu_ineq = [np.zeros(s) for s in sizes]
    nu_eq = np.zeros(n_eq)
    eta_f = np.zeros(problem.ell)
    for (kind, t, j), val in zip(tags, z):
        if kind == "ineq":
            nu_ineq[t - 1][j] = val
        elif kind == "eq":
            nu_eq[j] = val
        else:
            eta_f[j] = val
    mu = []
    for t in range(1, N + 1):
        block = [-nu_ineq[t - 1]]
        if t == N and n_eq:
            block.append(_two_sided(nu_eq))
        mu.append(np.concatenate(block))
    bundle = adjoint_backward(traj, u, mu, -1.0, eta_f, problem, derivs)
    return bundle


# -- the solver ------------------------------------------------------------------

def _unit_gradient_norm(problem, traj, u, derivs, row):
    """Norm of the control gradient of constraint row ``row`` of ``g_N``."""
    mu = [np.zeros(problem.n_inequality(t)) for t in range(1, problem.N)]
    mu.append(np.zeros(problem.n_inequality(problem.N) + 2 * problem.n_equality()))
    mu[-1][row] = -1.0
    grad = adjoint_backward(traj, u, mu, 0.0, None, problem, derivs).dH_du
    return float(np.linalg.norm(grad))


def constraint_scales(problem, u):
    """Gradient-norm scales of the state inequalities and terminal rows at ``u``.

    Each terminal equality row gets its own scale; all state inequalities
    share the largest gradient norm found among the stage-``N`` rows. The
    augmented Lagrangian works with constraints divided by these scales, so
    one penalty suits rows whose sensitivities differ by orders of
    magnitude. Zero gradients fall back to a unit scale.
    """
    P = problem
    traj = rollout(P.q0, P.x0, u, P.plant)
    derivs = stage_derivatives(traj, u, P)
    n_in = P.n_inequality(P.N)
    ineq = [_unit_gradient_norm(P, traj, u, derivs, j) for j in range(n_in)]
    scale_ineq = max(ineq, default=0.0)
    eq = np.array([_unit_gradient_norm(P, traj, u, derivs, n_in + j) for j in range(P.n_equality())])
    scale_ineq = scale_ineq if scale_ineq > 0.0 else 1.0
    eq[~(eq > 0.0)] = 1.0
    return scale_ineq, eq


def _row_gradient(problem, traj, u, derivs, t, row):
    """Control gradient of row ``row`` of ``g_t`` (``t = 1..N``)."""
    P = problem
    mu = [np.zeros(P.constraints(k, traj.q[k], traj.x[k]).size) for k in range(1, P.N + 1)]
    mu[t - 1][row] = -1.0
    return -adjoint_backward(traj, u, mu, 0.0, None, P, derivs).dH_du


def restore_feasibility(problem, u, nu_ineq=None, tol=1e-12, max_iter=8, opts=None):
    """Gauss-Newton correction of the terminal target and active state bounds.

    Moves ``u`` by the least-norm step that zeroes the linearized terminal
    equality and every state inequality that is violated or carries a
    positive multiplier in ``nu_ineq``, keeping controls at box bounds
    fixed and the frequency equality intact. The augmented Lagrangian
    leaves these constraints satisfied to roughly its feasibility
    tolerance; with large terminal multipliers that is not enough for
    complementary slackness, and a few such steps close the gap at a cost
    far below the optimality tolerance.

    Returns ``(u, traj, info)``; ``u`` is returned unchanged when the
    iteration does not reduce the violation.
    """
    opts = opts or SolverOptions()
    P = problem
    N, m = P.N, P.m
    lo, hi = P.u_lower.reshape(-1), P.u_upper.reshape(-1)
    A = P.freq.matrix if P.freq is not None else np.zeros((0, N * m))

    def rows_of(traj):
        rows, values = [], []
        n_in = P.n_inequality(N)
        for t in range(1, N + 1):
            g = P.inequality(t, traj.q[t], traj.x[t]).values
            keep = g > 0.0
            if nu_ineq is not None:
                keep |= nu_ineq[t - 1] > 0.0
            for j in np.flatnonzero(keep):
                rows.append((t, j))
                values.append(g[j])
        if P.n_equality():
            e = P.terminal_equality(traj.q[N], traj.x[N]).values
            rows += [(N, n_in + j) for j in range(e.size)]
            values += list(e)
        return rows, np.asarray(values)

    def violation(traj):
        ineq, eq = _violations_raw(P, traj)
        return max(ineq, eq)

    traj = rollout(P.q0, P.x0, u, P.plant)
    best = (u, traj, violation(traj))
    info = {"iterations": 0, "initial": best[2], "final": best[2]}
    for k in range(1, max_iter + 1):
        rows, values = rows_of(traj)
        if not rows or violation(traj) <= tol:
            break
        derivs = stage_derivatives(traj, u, P)
        G = np.array([_row_gradient(P, traj, u, derivs, t, j).reshape(-1) for t, j in rows])
        uf = u.reshape(-1)
        free = (uf > lo + opts.active_tol) & (uf < hi - opts.active_tol)
        K = np.vstack([G[:, free], A[:, free]])
        rhs = np.concatenate([-values, -A @ uf])
        step = np.zeros_like(uf)
        step[free] = np.linalg.lstsq(K, rhs, rcond=None)[0]
        try:
            u = project_feasible((uf + step).reshape(N, m), P.u_lower, P.u_upper, P.freq,
                                 opts.proj_tol, opts.proj_max_sweeps, opts.proj_method)
            traj = rollout(P.q0, P.x0, u, P.plant)
        except Exception:
            break
        info["iterations"] = k
        v = violation(traj)
        log.debug("restoration %d: violation %.3e step %.3e", k, v, float(np.max(np.abs(step))))
        if v < best[2]:
            best = (u, traj, v)
        elif v > 0.5 * best[2]:
            break
    info["final"] = best[2]
    return best[0], best[1], info


def _projected_residual(u, grad, problem, opts, warm=None):
    target = project_feasible(u - grad, problem.u_lower, problem.u_upper, problem.freq,
                              opts.proj_tol, opts.proj_max_sweeps, opts.proj_method, warm=warm)
    return float(np.max(np.abs(u - target)))


def _inner(merit, u, problem, opts, history, tol):
    """Projected gradient with Barzilai-Borwein steps and Armijo backtracking.

    Stops once the projected-gradient residual drops below ``tol``.
    """
    f, traj, g = merit.evaluate(u)
    alpha = None
    iters = 0
    warm_trial, warm_res = {}, {}
    res = _projected_residual(u, g, problem, opts, warm_res)
    while res >= tol and iters < opts.max_inner:
        iters += 1
        if alpha is None:
            gmax = float(np.max(np.abs(g)))
            alpha = 1.0 / gmax if gmax > 0 else 1.0
        alpha = min(max(alpha, opts.step_min), opts.step_max)
        step = alpha
        backtracks = 0
        while True:
            u_new = project_feasible(u - step * g, problem.u_lower, problem.u_upper, problem.freq,
                                     opts.proj_tol, opts.proj_max_sweeps, opts.proj_method,
                                     warm=warm_trial)
            d = u_new - u
            traj_new = _rollout(problem, u_new)
            delta = merit.change(u, traj, u_new, traj_new)
            if delta <= opts.armijo_c1 * float(np.sum(g * d)):
                break
            step *= opts.armijo_shrink
            backtracks += 1
            if step < 1e-16:
                # no decrease left at working precision
                log.debug("inner %d: line search stalled at residual %.3e", iters, res)
                return u, f, traj, g, res, iters
        _, _, g_new = merit.evaluate(u_new, traj=traj_new)
        f_new = f + delta
        s = (u_new - u).reshape(-1)
        y = (g_new - g).reshape(-1)
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else opts.step_max
        if delta > 0.0:
            history.setdefault("merit_increase", []).append(delta)
        history.setdefault("merit", []).append(f_new)
        u, f, traj, g = u_new, f_new, traj_new, g_new
        if not np.any(s):
            break
        res = _projected_residual(u, g, problem, opts, warm_res)
        log.debug("inner %d: merit %.10g residual %.3e step %.3e backtracks %d",
                  iters, f, res, step, backtracks)
    return u, f, traj, g, res, iters


def _inner_lbfgsb(merit, u, problem, opts, history, tol):
    """L-BFGS-B on the box until the projected gradient drops below ``tol``.

    The objective handed to the optimizer is the merit change from the
    starting point, accumulated term by term, so that its line search still
    sees decreases far below the rounding level of the merit itself.
    """
    P = problem
    shape = u.shape
    lo = np.broadcast_to(P.u_lower, shape).reshape(-1)
    hi = np.broadcast_to(P.u_upper, shape).reshape(-1)
    f0, traj0, _ = merit.evaluate(u, with_grad=False)
    u0 = u.copy()
    last = {}

    def fun(z):
        uz = z.reshape(shape)
        traj = _rollout(P, uz)
        _, _, g = merit.evaluate(uz, traj=traj)
        d = merit.change(u0, traj0, uz, traj)
        last.update(z=z.copy(), traj=traj, g=g, d=d)
        return d, g.reshape(-1)

    out = scipy.optimize.minimize(
        fun, u.reshape(-1), jac=True, method="L-BFGS-B", bounds=scipy.optimize.Bounds(lo, hi),
        options={"maxcor": opts.lbfgs_memory, "gtol": tol, "ftol": 0.0,
                 "maxiter": opts.max_inner, "maxfun": 2 * opts.max_inner},
    )
    z = out.x
    if "z" in last and np.array_equal(last["z"], z):
        traj, g, d = last["traj"], last["g"], last["d"]
    else:
        d, _ = fun(z)
        traj, g = last["traj"], last["g"]
    u_new = z.reshape(shape)
    res = float(np.max(np.abs(np.clip(z - g.reshape(-1), lo, hi) - z)))
    history.setdefault("merit", []).append(f0 + d)
    log.debug("L-BFGS-B: %s (%d iterations, residual %.3e)", out.message, out.nit, res)
    return u_new, f0 + d, traj, g, res, int(out.nit)


def _finish_tolerances(opts):
    tol = dict(opts.kkt_tolerances)
    tol["gradient"] = min(tol.get("gradient", np.inf), opts.grad_tol)
    tol["slackness"] = min(tol.get("slackness", np.inf), opts.comp_tol)
    return tol


def _try_finish(problem, opts, u, traj, nu_ineq, entry):
    """Restore feasibility and certify the restored point.

    Multipliers are fitted to the restored trajectory, so the test does not
    depend on how far the augmented Lagrangian estimates still lag. Returns
    ``(u, traj, bundle)`` when the point is feasible and its certificate
    passes with the gradient and slackness tolerances tightened to
    ``grad_tol`` and ``comp_tol``, else None.
    """
    P = problem
    if max(_violations_raw(P, traj)) >= opts.feas_tol or _freq_residual(P, u) > 0.0:
        u, traj, info = restore_feasibility(P, u, nu_ineq, opts=opts)
        entry["restored_violation"] = info["final"]
    viol = max(_violations_raw(P, traj))
    freq = _freq_residual(P, u)
    if viol >= opts.feas_tol or freq >= opts.feas_tol:
        return None
    derivs = stage_derivatives(traj, u, P)
    bundle = estimate_multipliers(P, traj, u, derivs)
    report = kkt_check(traj, u, bundle, P, _finish_tolerances(opts), derivs)
    entry["restored_gradient"] = report.residuals.get("gradient")
    entry["restored_slackness"] = report.residuals.get("slackness")
    log.info("restored point: violation %.3e gradient %.3e slackness %.3e",
             max(viol, freq), report.residuals.get("gradient", 0.0), report.residuals.get("slackness", 0.0))
    if report.ok:
        return u, traj, bundle
    return None


def _freq_residual(problem, u):
    if problem.freq is None or problem.freq.is_empty:
        return 0.0
    return float(np.max(np.abs(problem.freq.apply(u))))


def solve(problem, opts=None, u0=None):
    """Solve ``problem`` and certify the result.

    Returns a :class:`SolveResult`. With ``opts.raise_on_failure`` the
    failures surface as :class:`~lieocp.errors.MaxIterations` (carrying the
    best result) or :class:`~lieocp.errors.Infeasible`.
    """
    opts = opts or SolverOptions()
    if opts.inner_method not in ("lbfgsb", "projected"):
        raise ValueError(f"unknown inner method {opts.inner_method!r}")
    P = problem
    N, m = P.N, P.m
    rng = np.random.default_rng(opts.seed)
    start = np.zeros((N, m)) if u0 is None else np.asarray(u0, dtype=float).reshape(N, m)
    if opts.init_noise:
        start = start + opts.init_noise * rng.standard_normal((N, m))
    try:
        u = project_feasible(start, P.u_lower, P.u_upper, P.freq, opts.proj_tol, opts.proj_max_sweeps, opts.proj_method)
    except ProjectionStall as exc:
        raise Infeasible(str(exc)) from exc

    scale_ineq, scale_eq = constraint_scales(P, u)
    nu_ineq = [np.zeros(P.n_inequality(t)) for t in range(1, N + 1)]
    nu_eq = np.zeros(P.n_equality())
    # the frequency block joins the augmented Lagrangian only for L-BFGS-B
    freq_al = opts.inner_method == "lbfgsb" and P.ell > 0
    eta_f = np.zeros(P.ell) if freq_al else None
    scale_f = float(np.max(np.linalg.norm(P.freq.matrix, axis=1))) if freq_al else 1.0
    inner = _inner_lbfgsb if opts.inner_method == "lbfgsb" else _inner
    penalty = opts.penalty0
    prev_viol = np.inf
    stalled = 0
    history = {"outer": [], "scales": {"ineq": scale_ineq, "eq": scale_eq, "freq": scale_f}}
    inner_total = 0
    converged = infeasible = False
    fitted = None
    outer = 0
    inner_tol = opts.inner_tol0
    for outer in range(1, opts.max_outer + 1):
        rho_ineq = penalty / scale_ineq**2
        rho_eq = penalty / scale_eq**2
        rho_f = penalty / scale_f**2
        merit = _Merit(P, nu_ineq, nu_eq, rho_ineq, rho_eq, eta_f, rho_f)
        u, f, traj, g, res, iters = inner(merit, u, P, opts, history, inner_tol)
        inner_total += iters
        ineq_v, eq_v = _violations_raw(P, traj)
        viol = max(ineq_v, eq_v)
        scaled_viol = ineq_v / scale_ineq
        # first-order multiplier update
        comp = 0.0
        for t in range(1, N + 1):
            gt = P.inequality(t, traj.q[t], traj.x[t]).values
            nu_ineq[t - 1] = np.maximum(0.0, nu_ineq[t - 1] + rho_ineq * gt)
            if gt.size:
                comp = max(comp, float(np.max(np.abs(nu_ineq[t - 1] * gt))))
        if nu_eq.size:
            e = P.terminal_equality(traj.q[N], traj.x[N]).values
            nu_eq = nu_eq + rho_eq * e
            scaled_viol = max(scaled_viol, float(np.max(np.abs(e) / scale_eq)))
        if freq_al:
            w = P.freq.apply(u)
            eta_f = eta_f + rho_f * w
            viol = max(viol, float(np.max(np.abs(w))))
            scaled_viol = max(scaled_viol, float(np.max(np.abs(w))) / scale_f)
        entry = {"outer": outer, "penalty": penalty, "violation": viol,
                 "scaled_violation": scaled_viol, "complementarity": comp,
                 "residual": res, "inner": iters, "merit": f}
        history["outer"].append(entry)
        log.info("outer %d: penalty %.3g violation %.3e (scaled %.3e) complementarity %.3e "
                 "residual %.3e inner %d", outer, penalty, viol, scaled_viol, comp, res, iters)
        if scaled_viol < opts.restore_threshold:
            done = _try_finish(P, opts, u, traj, nu_ineq, entry)
            if done is not None:
                u, traj, fitted = done
                converged = True
                break
        if scaled_viol > 0.25 * prev_viol and viol >= opts.feas_tol:
            penalty *= opts.penalty_growth
            # a violation that no penalty increase moves is a local
            # minimizer of infeasibility
            stalled = stalled + 1 if scaled_viol > 0.99 * prev_viol else 0
            if penalty > opts.penalty_max or stalled >= opts.stall_outer:
                infeasible = True
                break
        else:
            stalled = 0
        prev_viol = min(prev_viol, scaled_viol)
        # solve the next subproblem about as accurately as the constraints hold,
        # and never less accurately than half the previous tolerance
        inner_tol = max(opts.grad_tol, min(0.5 * inner_tol, scaled_viol))

    derivs = stage_derivatives(traj, u, P)
    if fitted is not None:
        bundle = fitted
    else:
        bundle = recover_multipliers(P, traj, u, nu_ineq, nu_eq, derivs, opts.active_tol)
    report = kkt_check(traj, u, bundle, P, opts.kkt_tolerances, derivs)
    result = SolveResult(
        u=u,
        traj=traj,
        bundle=bundle,
        report=report,
        cost=P.total_cost(traj, u),
        violations=constraint_violations(P, u, traj),
        iterations={"outer": outer, "inner": inner_total},
        converged=converged,
        al_state={"nu_ineq": nu_ineq, "nu_eq": nu_eq, "eta_f": eta_f, "penalty": penalty,
                  "scale_ineq": scale_ineq, "scale_eq": scale_eq, "scale_f": scale_f},
        history=history,
    )
    if not converged and opts.raise_on_failure:
        if infeasible:
            raise Infeasible(
                f"constraint violation stuck at {viol:.3g} with penalty {penalty:.3g}"
            )
        raise MaxIterations(f"no convergence after {outer} outer iterations", result=result)
    return result
