"""Implicit attitude step, rollout and stage derivatives."""

import numpy as np
import pytest

from lieocp import lie
from lieocp.dynamics import (
    AttitudePlant,
    AttitudeState,
    InertiaData,
    LinearPlant,
    attitude_residual,
    attitude_step,
    rollout,
    solve_relative_rotation,
)
from lieocp.errors import NoConvergence

J_BENCH = [800.0, 1200.0, 1000.0]


@pytest.fixture(params=["trace", "momentum"])
def inertia(request):
    return InertiaData(J_BENCH, 0.1, convention=request.param)


def test_inertia_validation():
    with pytest.raises(ValueError):
        InertiaData([1.0, -1.0, 1.0], 0.1)
    with pytest.raises(ValueError):
        InertiaData([1.0, 1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        InertiaData([1.0, 1.0, 1.0], 0.1, convention="other")
    trace = InertiaData(J_BENCH, 0.1)
    np.testing.assert_allclose(trace.J_d, np.diag([2200.0, 1800.0, 2000.0]))
    momentum = InertiaData(J_BENCH, 0.1, convention="momentum")
    np.testing.assert_allclose(momentum.J_d, np.diag([700.0, 300.0, 500.0]))
    # M = tr(J_d) I - J_d recovers J in the momentum convention
    np.testing.assert_allclose(momentum.M, np.diag(J_BENCH))


def test_zero_momentum_gives_identity(inertia):
    np.testing.assert_array_equal(solve_relative_rotation(np.zeros(3), inertia), np.eye(3))


def test_axis_aligned_momentum(inertia):
    S = solve_relative_rotation([10.0, 0.0, 0.0], inertia)
    assert np.max(np.abs(attitude_residual(S, [10.0, 0.0, 0.0], inertia))) <= 1e-10
    v = lie.log_so3(S)
    assert abs(v[1]) < 1e-14 and abs(v[2]) < 1e-14 and v[0] > 0


def test_linearization_consistency(inertia):
    rng = np.random.default_rng(0)
    for _ in range(20):
        Pi = rng.normal(size=3)
        Pi *= rng.uniform(0, 1e-3) / np.linalg.norm(Pi)
        v = lie.log_so3(solve_relative_rotation(Pi, inertia))
        assert np.linalg.norm(v - inertia.h * np.linalg.solve(inertia.M, Pi)) <= 1e-8


def test_random_momenta_converge_quickly(inertia):
    rng = np.random.default_rng(1)
    for _ in range(200):
        Pi = rng.normal(size=3)
        Pi *= rng.uniform(0, 60) / np.linalg.norm(Pi)
        S, k = solve_relative_rotation(Pi, inertia, return_iterations=True)
        assert np.max(np.abs(attitude_residual(S, Pi, inertia))) <= 1e-10
        assert k <= 10
        assert lie.is_rotation(S)


def test_oversized_step_raises():
    inertia = InertiaData(J_BENCH, 50.0)
    with pytest.raises(NoConvergence):
        solve_relative_rotation([6e3, 5e3, -4e3], inertia)


def test_step_equilibrium_and_conservation(inertia):
    state = AttitudeState(R=np.eye(3), Pi=np.zeros(3))
    nxt = attitude_step(state, np.zeros(3), inertia)
    np.testing.assert_array_equal(nxt.R, np.eye(3))
    np.testing.assert_array_equal(nxt.Pi, np.zeros(3))

    rng = np.random.default_rng(2)
    for _ in range(20):
        R = lie.exp_so3(rng.uniform(-1, 1, size=3))
        state = AttitudeState(R=R, Pi=rng.uniform(-30, 30, size=3))
        nxt = attitude_step(state, np.zeros(3), inertia)
        np.testing.assert_allclose(nxt.R @ nxt.Pi, state.R @ state.Pi, atol=1e-12)


def test_long_horizon_conservation(inertia):
    plant = AttitudePlant(inertia)
    Pi0 = np.array([5.0, 5.0, 5.0])
    traj = rollout(np.eye(3), Pi0, np.zeros((130, 3)), plant)
    spatial = np.einsum("tij,tj->ti", traj.q, traj.x)
    assert np.max(np.linalg.norm(spatial - Pi0, axis=1)) <= 1e-9
    # the body drifts: attitude moves although the momentum is conserved
    assert np.linalg.norm(lie.log_so3(traj.q[-1])) > 1e-2


def test_rollout_shapes_and_determinism(inertia):
    plant = AttitudePlant(inertia)
    empty = rollout(np.eye(3), np.ones(3), np.zeros((0, 3)), plant)
    assert empty.N == 0 and empty.q.shape == (1, 3, 3)
    rng = np.random.default_rng(3)
    u = rng.uniform(-20, 20, size=(25, 3))
    a = rollout(np.eye(3), np.zeros(3), u, plant)
    b = rollout(np.eye(3), np.zeros(3), u, plant)
    assert np.array_equal(a.q, b.q) and np.array_equal(a.x, b.x) and np.array_equal(a.phi, b.phi)
    for t in range(25):
        np.testing.assert_allclose(a.q[t + 1], a.q[t] @ lie.exp_so3(a.phi[t]), atol=1e-15)


def test_rollout_reports_failing_stage():
    plant = AttitudePlant(InertiaData(J_BENCH, 50.0))
    u = np.zeros((5, 3))
    u[2] = [120.0, 100.0, -80.0]
    with pytest.raises(NoConvergence) as info:
        rollout(np.eye(3), np.zeros(3), u, plant)
    assert info.value.stage == 3


def test_linear_plant_derivatives_are_exact():
    F = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]])
    plant = LinearPlant(np.eye(3), F)
    d = plant.derivatives(0, np.eye(3), np.zeros(3), np.zeros(2))
    np.testing.assert_array_equal(d.g_x, np.eye(3))
    np.testing.assert_array_equal(d.g_u, F)
    np.testing.assert_array_equal(plant.step_state(0, np.eye(3), np.ones(3), [1.0, 1.0]), 1 + F.sum(axis=1))


def test_derivative_at_rest(inertia):
    d = AttitudePlant(inertia).derivatives(0, np.eye(3), np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(d.phi_x, inertia.h * np.linalg.inv(inertia.M), atol=1e-15)


def test_implicit_matches_finite_differences(inertia):
    plant = AttitudePlant(inertia)
    rng = np.random.default_rng(4)
    for _ in range(20):
        Pi = rng.normal(size=3)
        Pi *= rng.uniform(0, 60) / np.linalg.norm(Pi)
        a = plant.derivatives(0, np.eye(3), Pi, np.zeros(3), method="implicit")
        b = plant.derivatives(0, np.eye(3), Pi, np.zeros(3), method="fd")
        assert np.linalg.norm(a.phi_x - b.phi_x) <= 1e-5 * np.linalg.norm(a.phi_x)
        assert np.linalg.norm(a.g_x - b.g_x) <= 1e-5 * np.linalg.norm(a.g_x)


def test_batched_derivatives_match(inertia):
    plant = AttitudePlant(inertia)
    rng = np.random.default_rng(5)
    u = rng.uniform(-20, 20, size=(30, 3))
    traj = rollout(np.eye(3), np.zeros(3), u, plant)
    batch = plant.derivatives_batch(traj.q, traj.x, u, traj.phi)
    for t in range(30):
        single = plant.derivatives(t, traj.q[t], traj.x[t], u[t], phi=traj.phi[t])
        np.testing.assert_allclose(batch[t].phi_x, single.phi_x, atol=1e-15, rtol=1e-12)
        np.testing.assert_allclose(batch[t].g_x, single.g_x, atol=1e-15, rtol=1e-12)
