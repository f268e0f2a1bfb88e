"""Shared problem builders."""

import numpy as np
import pytest

from lieocp import lie
from lieocp.dynamics import AttitudePlant, InertiaData, LinearPlant, rollout
from lieocp.problem import ProblemSpec
from lieocp.spectrum import ForbiddenBinSpec, band_bins, build_constraints

J_BENCH = (800.0, 1200.0, 1000.0)

# criterion number -> (verdict, detail), filled by test_acceptance.py
ACCEPTANCE = {}
AXIS = np.ones(3) / np.sqrt(3.0)
ANGLE = np.deg2rad(50.0)


def benchmark_problem(N=130, h=0.1, convention="momentum", freq=True):
    """The 50 degree rest-to-rest maneuver about (1, 1, 1) with the benchmark bounds."""
    inertia = InertiaData(J_BENCH, h, convention=convention)
    C = None
    if freq:
        bins = band_bins(N, 2 * np.pi / 3, 4 * np.pi / 3)
        C = build_constraints(N, 3, [ForbiddenBinSpec(1, bins), ForbiddenBinSpec(3, bins)])
    return ProblemSpec(
        plant=AttitudePlant(inertia),
        N=N,
        q0=np.eye(3),
        x0=np.zeros(3),
        u_lower=-20.0,
        u_upper=20.0,
        x_bound=np.full(3, 60.0),
        target=(lie.exp_so3(ANGLE * AXIS), np.zeros(3)),
        freq=C,
    )


def toy_problem(target=1.0, box=1.0, dc_forbidden=False):
    """Scalar ``x+ = x + u`` with ``N = 3`` and terminal ``x_3 = target``."""
    plant = LinearPlant([[1.0]], [[1.0]])
    C = None
    if dc_forbidden:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            C = build_constraints(3, 1, [ForbiddenBinSpec(1, (1,))])
    return ProblemSpec(
        plant=plant,
        N=3,
        q0=np.eye(3),
        x0=[0.0],
        u_lower=-box,
        u_upper=box,
        target=None if target is None else (np.eye(3), [target]),
        freq=C,
    )


def random_feasible_controls(problem, rng, scale=5.0):
    """Random controls inside the box and the frequency nullspace."""
    from lieocp.spectrum import project_onto_nullspace

    u = rng.uniform(-scale, scale, size=(problem.N, problem.m))
    if problem.freq is not None:
        u = project_onto_nullspace(u, problem.freq)
    return np.clip(u, problem.u_lower, problem.u_upper)


def roll(problem, u):
    return rollout(problem.q0, problem.x0, u, problem.plant)


@pytest.fixture(scope="session")
def bench():
    return benchmark_problem()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
