"""Acceptance criteria, each run at its stated tolerance.

Every test records one line in ``ACCEPTANCE`` which the session summary
prints as ``criterion N: PASS|FAIL|LOG ...``. Criterion 9 is qualitative
and only logged.
"""

import itertools
import math
import time

import numpy as np
import pytest

from lieocp import cli, lie
from lieocp.dynamics import AttitudePlant, InertiaData, rollout, rollout_batch, solve_relative_rotation
from lieocp.dynamics import attitude_residual
from lieocp.pmp import adjoint_backward, kkt_check, zero_mu
from lieocp.solver import SolverOptions, estimate_multipliers, solve
from lieocp.spectrum import spectrum

from conftest import ACCEPTANCE, J_BENCH, benchmark_problem, random_feasible_controls, roll, toy_problem

BENCHMARK_CONFIG = "configs/benchmark.toml"


def record(number, ok, detail):
    ACCEPTANCE[number] = ("PASS" if ok else "FAIL", detail)
    return ok


def random_ball(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v *= (radius * rng.uniform(size=(n, 1)) ** (1 / 3)) / np.linalg.norm(v, axis=1, keepdims=True)
    return v


def test_criterion_1_lie_kernel():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    V = random_ball(rng, 10_000, 3.0)
    A, W = rng.normal(size=(10_000, 3)), rng.normal(size=(10_000, 3))
    round_trip = ortho = pairing = 0.0
    for v, a, w in zip(V, A, W):
        R = lie.exp_so3(v)
        round_trip = max(round_trip, float(np.max(np.abs(lie.log_so3(R) - v))))
        ortho = max(ortho, float(np.max(np.abs(R.T @ R - np.eye(3)))), abs(float(np.linalg.det(R)) - 1.0))
        lhs = float(lie.dexp_dual(v, a) @ w)
        pairing = max(pairing, abs(lhs - float(a @ lie.dexp(v, w))) / max(1.0, abs(lhs)))
    # the primal map itself against central differences of the exponential
    fd = 0.0
    step = 1e-6
    for v, w in zip(V[:1000], W[:1000]):
        dR = (lie.exp_so3(v + step * w) - lie.exp_so3(v - step * w)) / (2 * step)
        X = lie.exp_so3(v).T @ dR
        exact = lie.dexp(v, w)
        fd = max(fd, float(np.linalg.norm(lie.vee(0.5 * (X - X.T)) - exact) / np.linalg.norm(exact)))
    elapsed = time.perf_counter() - start
    ok = round_trip <= 1e-10 and ortho <= 1e-12 and pairing <= 1e-12 and fd <= 1e-6 and elapsed < 5.0
    record(1, ok, f"round trip {round_trip:.1e}, orthogonality/det {ortho:.1e}, pairing {pairing:.1e}, "
                  f"dexp vs FD {fd:.1e}, {elapsed:.2f} s")
    assert ok


@pytest.mark.parametrize("convention", ["momentum", "trace"])
def test_criterion_2_implicit_step(convention):
    start = time.perf_counter()
    inertia = InertiaData(J_BENCH, 0.1, convention=convention)
    rng = np.random.default_rng(2)
    residual, iterations = 0.0, 0
    for Pi in random_ball(rng, 1000, 60.0):
        S, k = solve_relative_rotation(Pi, inertia, return_iterations=True)
        residual = max(residual, float(np.max(np.abs(attitude_residual(S, Pi, inertia)))))
        iterations = max(iterations, k)
    drift = 0.0
    plant = AttitudePlant(inertia)
    for Pi0 in random_ball(rng, 5, 60.0):
        traj = rollout(np.eye(3), Pi0, np.zeros((130, 3)), plant)
        spatial = np.einsum("tij,tj->ti", traj.q, traj.x)
        drift = max(drift, float(np.max(np.linalg.norm(spatial - Pi0, axis=1))))
    elapsed = time.perf_counter() - start
    ok = residual <= 1e-10 and iterations <= 10 and drift <= 1e-9 and elapsed < 10.0
    line = (f"[{convention}] residual {residual:.1e}, Newton iterations <= {iterations}, "
            f"momentum drift {drift:.1e}, {elapsed:.2f} s")
    prev = ACCEPTANCE.get(2)
    if prev:
        ok_all = ok and prev[0] == "PASS"
        record(2, ok_all, prev[1] + "; " + line)
    else:
        record(2, ok, line)
    assert ok


def test_criterion_3_gradient():
    start = time.perf_counter()
    problem = benchmark_problem()
    rng = np.random.default_rng(3)
    step = 1e-4
    worst = 0.0
    for _ in range(10):
        u = random_feasible_controls(problem, rng, scale=5.0)
        traj = roll(problem, u)
        mu = [-rng.uniform(0, 1, size=m.size) for m in zero_mu(problem, traj)]
        b = adjoint_backward(traj, u, mu, -1.0, None, problem)
        n = u.size
        E = np.eye(n).reshape(n, *u.shape) * step
        q, x = rollout_batch(problem.q0, problem.x0, np.concatenate([u + E, u - E]), problem.plant)

        def objective(k, uk):
            val = 0.5 * float(np.sum(uk * uk))
            for t in range(1, problem.N + 1):
                val -= mu[t - 1] @ problem.constraints(t, q[k, t], x[k, t]).values
            return val

        plus = np.array([objective(k, u + E[k]) for k in range(n)])
        minus = np.array([objective(n + k, u - E[k]) for k in range(n)])
        fd = ((plus - minus) / (2 * step)).reshape(u.shape)
        worst = max(worst, float(np.linalg.norm(-b.dH_du - fd) / np.linalg.norm(fd)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 60.0
    record(3, ok, f"max relative error {worst:.1e} over 10 points, {elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def benchmark_run():
    config = cli.load_config(BENCHMARK_CONFIG)
    problem, opts = cli.build_problem(config)
    start = time.perf_counter()
    result = solve(problem, opts)
    elapsed = time.perf_counter() - start
    return config, problem, result, elapsed


def test_criterion_4_frequency_nulling(benchmark_run):
    _, problem, result, _ = benchmark_run
    u = result.u
    spec = np.abs(spectrum(u))
    umax = float(np.max(np.abs(u)))
    forbidden = problem.freq.forbidden()
    worst = max(float(np.max(spec[np.asarray(b) - 1, ch - 1])) for ch, b in forbidden.items())
    band = np.asarray(forbidden[1]) - 1
    free = float(np.max(spec[band, 1]))
    ok = sorted(forbidden) == [1, 3] and worst <= 1e-6 * umax
    record(4, ok, f"forbidden-bin peak / max|u| = {worst / umax:.1e} (channels 1, 3); "
                  f"channel 2 band peak / max|u| = {free / umax:.1e}")
    assert ok


def test_criterion_5_bounds(benchmark_run):
    _, problem, result, _ = benchmark_run
    u_excess = float(np.max(np.abs(result.u)) - 20.0)
    Pi_excess = float(np.max(np.abs(result.traj.x)) - 60.0)
    ok = u_excess <= 1e-6 and Pi_excess <= 1e-6
    record(5, ok, f"max|u| - 20 = {u_excess:.1e}, max|Pi| - 60 = {Pi_excess:.1e}")
    assert ok


def test_criterion_6_maneuver(benchmark_run):
    _, problem, result, elapsed = benchmark_run
    qf, _ = problem.target
    att = float(np.linalg.norm(lie.log_so3(qf.T @ result.traj.q[-1])))
    mom = float(np.linalg.norm(result.traj.x[-1]))
    angle = math.degrees(np.linalg.norm(lie.log_so3(result.traj.q[-1])))
    ok = att <= 1e-4 and mom <= 1e-4 and elapsed <= 600.0 and result.converged
    record(6, ok, f"attitude error {att:.1e} rad, |Pi_N| {mom:.1e}, slew {angle:.4f} deg, "
                  f"solve {elapsed:.0f} s, converged {result.converged}")
    assert ok


def test_criterion_7_certificate(benchmark_run):
    _, problem, result, _ = benchmark_run
    tol = SolverOptions().kkt_tolerances
    own = result.report
    fitted = kkt_check(result.traj, result.u, estimate_multipliers(problem, result.traj, result.u), problem, tol)
    parts = []
    ok = True
    for name, report in (("solver report", own), ("recomputed from trajectory", fitted)):
        passed = report.ok and report.eta_c == -1.0 and max(
            report.tolerances[k] for k in report.residuals if k not in ("state_dynamics", "nontriviality")
        ) <= 1e-4
        ok = ok and passed
        worst = ", ".join(f"{k} {v:.1e}" for k, v in report.residuals.items())
        parts.append(f"{name}: {'pass' if passed else 'fail'} ({worst})")
    record(7, ok, "; ".join(parts))
    assert ok


def test_criterion_8_toy_oracles():
    result = solve(toy_problem())
    grid = np.linspace(-1, 1, 41)
    best = min(0.5 * sum(v * v for v in u) for u in itertools.product(grid, repeat=3) if abs(sum(u) - 1.0) < 1e-9)
    err = float(np.max(np.abs(result.u[:, 0] - 1 / 3)))
    ok = best >= result.cost - 1e-3 and err <= 1e-6
    record(8, ok, f"solver cost {result.cost:.9f}, grid minimum {best:.9f}, |u - 1/3| {err:.1e}")
    assert ok


def windows(mask, h):
    out, start = [], None
    for t, on in enumerate(list(mask) + [False]):
        if on and start is None:
            start = t
        if not on and start is not None:
            out.append(f"{start * h:.1f}-{t * h:.1f}s")
            start = None
    return out


def test_criterion_9_qualitative(benchmark_run):
    config, problem, result, _ = benchmark_run
    h = config.h
    parts = []
    for ch in range(3):
        sat = windows(np.abs(result.u[:, ch]) >= 20.0 - 1e-6, h)
        act = windows(np.abs(result.traj.x[1:, ch]) >= 60.0 - 1e-6, h)
        parts.append(f"axis {ch + 1}: torque saturated {sat or 'never'}, momentum at bound {act or 'never'}")
    ACCEPTANCE[9] = ("LOG", "; ".join(parts))
