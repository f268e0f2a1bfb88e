"""Projection, augmented Lagrangian synthesis and multiplier recovery on small problems."""

import itertools
import warnings

import numpy as np
import pytest
import scipy.optimize

from lieocp.dynamics import LinearPlant
from lieocp.errors import Infeasible, ProjectionStall
from lieocp.problem import ProblemSpec
from lieocp.solver import (
    SolverOptions,
    constraint_violations,
    project_feasible,
    recover_multipliers,
    solve,
)
from lieocp.spectrum import ForbiddenBinSpec, build_constraints

from conftest import toy_problem


def dc_constraint(N, m=1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_constraints(N, m, [ForbiddenBinSpec(1, (1,))])


def qp_oracle(u, lower, upper, A):
    """Dense projection onto ``box ∩ {A v = 0}`` by SLSQP."""
    flat = u.reshape(-1)
    res = scipy.optimize.minimize(
        lambda v: 0.5 * np.sum((v - flat) ** 2),
        np.clip(flat, lower, upper) * 0.0,
        jac=lambda v: v - flat,
        bounds=list(zip(np.broadcast_to(lower, flat.shape), np.broadcast_to(upper, flat.shape))),
        constraints=[{"type": "eq", "fun": lambda v: A @ v, "jac": lambda v: A}],
        method="SLSQP",
        options={"ftol": 1e-13, "maxiter": 1000},
    )
    assert res.success
    return res.x.reshape(u.shape)


@pytest.mark.parametrize("method", ["dykstra", "newton"])
def test_projection_without_frequency_is_clip(method):
    u = np.array([[3.0, -0.5], [-2.0, 0.1]])
    np.testing.assert_array_equal(project_feasible(u, -1, 1, None, method=method), np.clip(u, -1, 1))


@pytest.mark.parametrize("method", ["dykstra", "newton"])
def test_projection_is_idempotent(method):
    C = dc_constraint(6, 2)
    u = np.array([[0.5, 0.1], [-0.5, 0.2], [0.2, -0.3], [-0.2, 0.0], [0.3, 0.1], [-0.3, -0.1]])
    u[:, 0] -= u[:, 0].mean()
    np.testing.assert_allclose(project_feasible(u, -1, 1, C, method=method), u, atol=1e-12)


@pytest.mark.parametrize("method", ["dykstra", "newton"])
@pytest.mark.parametrize("u", [[2.0, 2.0, 2.0, 2.0], [2.0, 0.5, -0.3, 1.5], [-3.0, 0.9, 0.2, 0.1]])
def test_projection_matches_dense_qp(method, u):
    u = np.array(u)[:, None]
    C = dc_constraint(4)
    out = project_feasible(u, -1, 1, C, method=method)
    oracle = qp_oracle(u, -1.0, 1.0, C.matrix)
    np.testing.assert_allclose(out, oracle, atol=1e-6)
    assert np.max(np.abs(out)) <= 1 + 1e-9
    assert abs(out.sum()) <= 1e-9


@pytest.mark.parametrize("method", ["dykstra", "newton"])
def test_projection_random_instances(method):
    rng = np.random.default_rng(0)
    C = build_constraints(12, 2, [ForbiddenBinSpec(1, (2, 3)), ForbiddenBinSpec(2, (5,))])
    for _ in range(5):
        u = rng.normal(scale=3.0, size=(12, 2))
        out = project_feasible(u, -2, 2, C, method=method, max_sweeps=5000)
        np.testing.assert_allclose(out, qp_oracle(u, -2.0, 2.0, C.matrix), atol=1e-6)
        assert np.max(np.abs(C.apply(out))) <= 1e-9
        assert np.max(np.abs(out)) <= 2 + 1e-9


def test_projection_stall_reports_tolerances():
    C = dc_constraint(4)
    with pytest.raises(ProjectionStall) as info:
        project_feasible(np.array([[5.0], [4.0], [-0.5], [1.0]]), -1, 1, C, max_sweeps=1)
    assert info.value.box_violation >= 0 and info.value.freq_violation >= 0


def test_toy_least_norm_solution():
    r = solve(toy_problem())
    assert r.converged
    np.testing.assert_allclose(r.u[:, 0], [1 / 3, 1 / 3, 1 / 3], atol=1e-6)
    assert r.cost == pytest.approx(1 / 6, abs=1e-6)
    assert r.report.ok
    assert r.report.eta_c == -1.0
    assert not r.history.get("merit_increase")


def test_toy_against_brute_force_grid():
    r = solve(toy_problem())
    grid = np.linspace(-1, 1, 41)
    best = np.inf
    for u in itertools.product(grid, repeat=3):
        if abs(sum(u) - 1.0) < 1e-9:
            best = min(best, 0.5 * sum(v * v for v in u))
    assert best >= r.cost - 1e-3
    assert best - r.cost < 1e-2


def test_toy_with_tight_box_saturates():
    # target 2.7 with |u| <= 1 forces u close to the bound everywhere
    r = solve(toy_problem(target=2.7))
    np.testing.assert_allclose(r.u[:, 0], [0.9, 0.9, 0.9], atol=1e-6)
    r = solve(toy_problem(target=3.0))
    np.testing.assert_allclose(r.u[:, 0], [1.0, 1.0, 1.0], atol=1e-6)
    assert r.violations["box"] == 0.0


def test_contradictory_constraints_are_infeasible():
    with pytest.raises(Infeasible):
        solve(toy_problem(dc_forbidden=True))


def test_unreachable_target_is_infeasible():
    with pytest.raises(Infeasible):
        solve(toy_problem(target=3.5))


def test_stalled_violation_stops_before_penalty_cap():
    r = solve(toy_problem(target=3.5), SolverOptions(raise_on_failure=False))
    assert not r.converged
    assert r.al_state["penalty"] <= 1e7
    # the closest reachable point is the saturated control
    np.testing.assert_allclose(r.u[:, 0], 1.0, atol=1e-6)


@pytest.mark.parametrize("inner", ["lbfgsb", "projected"])
def test_frequency_multiplier_matches_closed_form(inner):
    b = np.array([1.0, 2.0, 3.0])
    problem = ProblemSpec(
        plant=LinearPlant([[1.0]], b.reshape(3, 1, 1)), N=3, q0=np.eye(3), x0=[0.0],
        u_lower=-1.0, u_upper=1.0, target=(np.eye(3), [1.0]), freq=dc_constraint(3),
    )
    r = solve(problem, SolverOptions(grad_tol=1e-8, inner_method=inner))
    assert r.converged and r.report.ok
    A = np.vstack([b, np.ones(3)])
    y = np.linalg.solve(A @ A.T, [1.0, 0.0])
    np.testing.assert_allclose(r.u[:, 0], A.T @ y, atol=1e-6)
    # the DC row of the unitary DFT is 1/sqrt(3) on every stage
    np.testing.assert_allclose(r.bundle.eta_f, [np.sqrt(3.0) * y[1]], atol=1e-6)


def test_recovered_multipliers_trivial_cases():
    problem = toy_problem(target=None)
    r = solve(problem)
    np.testing.assert_array_equal(r.u, 0.0)
    assert all(not m.any() for m in r.bundle.mu)
    assert r.bundle.eta_f.size == 0
    b = recover_multipliers(problem, r.traj, r.u, r.al_state["nu_ineq"], r.al_state["nu_eq"])
    assert b.eta_c == -1.0


def test_state_constraint_sign_bridge():
    # x_t <= 0.25 for t = 1..3 binds on the toy; mu must come out non-positive
    problem = toy_problem(target=None)
    problem.cost = _PullCost()
    problem.x_bound = np.array([0.25])
    r = solve(problem)
    assert r.converged and r.report.ok
    assert r.violations["state_constraint"] <= 1e-6
    nu = np.concatenate(r.al_state["nu_ineq"])
    mu = np.concatenate(r.bundle.mu)
    assert np.all(nu >= 0) and np.all(mu <= 0) and np.any(mu < 0)
    np.testing.assert_allclose(mu, -nu, atol=0)


class _PullCost:
    """``u^2/2`` per stage and ``-x`` at the end: the state wants to grow."""

    def stage(self, t, q, x, u):
        return 0.5 * float(u @ u)

    def stage_grad(self, t, q, x, u):
        return np.zeros(3), np.zeros(1), np.array(u, dtype=float)

    def terminal(self, q, x):
        return -float(x[0])

    def terminal_grad(self, q, x):
        return np.zeros(3), np.array([-1.0])


def test_determinism():
    opts = SolverOptions(init_noise=0.3, seed=7)
    a, b = solve(toy_problem(), opts), solve(toy_problem(), opts)
    assert np.array_equal(a.u, b.u) and a.cost == b.cost
    assert a.history["outer"] == b.history["outer"]


def test_violations_are_recomputed():
    r = solve(toy_problem())
    fresh = constraint_violations(toy_problem(), r.u)
    assert fresh == r.violations


def test_unknown_inner_method_is_rejected():
    with pytest.raises(ValueError):
        solve(toy_problem(), SolverOptions(inner_method="newton"))
