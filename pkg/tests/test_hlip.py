import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import deadbeat_residual, orbit_residual, random_params, rk4_matrices
from bipedplan.hlip import (
    HlipParams,
    HlipState,
    RobotState,
    _prediction_matrices,
    deadbeat_gain,
    l_step_cost,
    nominal_state,
    orbit_state,
    rollout,
    s2s_matrices,
    stance_feedback,
    step_sequence_track,
    track_axis,
)


def test_matrices_match_rk4_at_default():
    A, B = s2s_matrices(HlipParams(0.4, 0.3, 9.81))
    Ar, Br = rk4_matrices(HlipParams(0.4, 0.3, 9.81))
    assert np.max(np.abs(A - Ar)) < 1e-9 and np.max(np.abs(B - Br)) < 1e-9


def test_matrices_match_rk4_over_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(20):
        params = random_params(rng)
        A, B = s2s_matrices(params)
        Ar, Br = rk4_matrices(params)
        assert max(np.max(np.abs(A - Ar)), np.max(np.abs(B - Br))) < 1e-9


def test_small_lambda_t_limit():
    params = HlipParams(z0=1e5, T_ssp=0.3)
    T, w2 = params.T_ssp, params.gravity / params.z0
    A, B = s2s_matrices(params)
    A0 = np.array([[1, 0, T], [0, 1, -T], [0, -w2 * T, 1]])
    B0 = np.array([[0], [1], [-w2 * T]])
    eps = (params.lam * T) ** 2
    assert np.max(np.abs(A - A0)) < 2 * eps and np.max(np.abs(B - B0)) < 2 * eps


def test_equilibrium_and_zero_control_rollout():
    A, B = s2s_matrices(HlipParams())
    np.testing.assert_allclose(A @ [0.7, 0, 0], [0.7, 0, 0], atol=1e-15)
    states, feet = rollout(HlipState(0.7), np.zeros(5), HlipParams())
    np.testing.assert_allclose(states, np.tile([0.7, 0, 0], (6, 1)), atol=1e-15)


def test_foot_telescoping():
    rng = np.random.default_rng(1)
    u = rng.normal(0, 0.2, 12)
    _, feet = rollout(HlipState(0.1, -0.05, 0.3), u, HlipParams())
    np.testing.assert_allclose(np.diff(feet), u, atol=1e-12)


@pytest.mark.parametrize("d", [0.0, 0.12, -0.08, 0.3])
def test_period_one_orbit_reproduces(d):
    assert orbit_residual(HlipParams(), d) < 1e-9


def test_forward_orbit_offset_is_linear():
    params = HlipParams()
    a = orbit_state(params, [1.0])
    np.testing.assert_allclose(orbit_state(params, [0.12]), 0.12 * a, atol=1e-15)
    assert a[0] == pytest.approx(-0.5)  # symmetric swing: foot starts half a step behind


def test_deadbeat_is_nilpotent():
    rng = np.random.default_rng(2)
    for params in [HlipParams()] + [random_params(rng) for _ in range(10)]:
        A, B = s2s_matrices(params)
        K = deadbeat_gain(params)
        closed = A[1:, 1:] + B[1:, :] @ K.reshape(1, 2)
        assert np.max(np.abs(closed @ closed)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.1, 0.1), st.floats(-0.5, 0.5), st.floats(-0.2, 0.3))
def test_deadbeat_converges_in_two_steps(dp, dv, d):
    assert deadbeat_residual(HlipParams(), (dp, dv), d) < 1e-9


def test_stance_feedback_examples():
    params, d = HlipParams(), 0.12
    p, v = orbit_state(params, [d])
    x = HlipState(0.3, p, v)
    assert stance_feedback(x, x.foot + d, params) == pytest.approx(d, abs=1e-9)
    off = HlipState(0.3, p + 0.02, v - 0.1)
    assert stance_feedback(off, off.foot + d, params, gain=np.zeros(2)) == pytest.approx(d, abs=1e-15)


def test_self_consistent_targets_recovered():
    rng = np.random.default_rng(3)
    params = HlipParams()
    for _ in range(10):
        state = RobotState(
            HlipState(*rng.normal(0, [0.2, 0.05, 0.2])),
            HlipState(*rng.normal(0, [0.2, 0.05, 0.2])),
            tuple(rng.normal(0, 0.1, 2)),
        )
        u = rng.normal(0, 0.15, size=(6, 2))
        targets = np.column_stack([rollout(state.axis(i), u[:, i], params)[1][1:] for i in range(2)])
        plan, _ = step_sequence_track(targets, state, params, r_s=1e-12)
        assert np.max(np.abs(plan.steps - targets)) < 1e-8


def test_stationary_target():
    plan, cost = step_sequence_track([[0.0, 0.0]], RobotState())
    assert np.max(np.abs(plan.step_sizes)) < 1e-12 and cost < 1e-12


def test_far_targets_give_best_effort():
    plan, cost = step_sequence_track(np.full((3, 2), 10.0), RobotState())
    assert np.all(np.isfinite(plan.steps)) and cost > 0


def test_plan_cost_equals_l_step_cost():
    rng = np.random.default_rng(4)
    state = nominal_state(HlipParams(), 0.12, 0.08, 1, heading=0.3)
    targets = rng.normal(0, 0.3, size=(6, 2))
    plan, cost = step_sequence_track(targets, state)
    assert l_step_cost(plan.steps, targets, state, HlipParams()) == pytest.approx(cost, rel=1e-12)


def test_first_order_optimality():
    rng = np.random.default_rng(5)
    params = HlipParams()
    state = nominal_state(params, 0.12, 0.08, 0, heading=-0.4, com=(0.5, 0.2))
    targets = np.cumsum(rng.normal(0.1, 0.1, size=(6, 2)), axis=0)
    plan, cost = step_sequence_track(targets, state, params)
    for i in range(2):
        for k in range(6):
            for h in (1e-4, -1e-4):
                u = plan.step_sizes.copy()
                u[k, i] += h
                feet = np.column_stack([rollout(state.axis(j), u[:, j], params)[1][1:] for j in range(2)])
                assert l_step_cost(feet, targets, state, params) >= cost


def test_axis_decoupling_against_joint_solve():
    rng = np.random.default_rng(6)
    params, q_s, r_s = HlipParams(), 1.0, 0.01
    state = nominal_state(params, 0.12, 0.08, 1, heading=0.7)
    m = 6
    targets = rng.normal(0, 0.4, size=(m, 2))
    blocks, rhs_parts = [], []
    D = np.eye(m) - np.eye(m, k=-1)
    for i in range(2):
        free, G = _prediction_matrices(params, state.axis(i).vector, m)
        d = np.zeros(m)
        d[0] = state.prev_step[i]
        blocks.append(q_s * G.T @ G + r_s * D.T @ D)
        rhs_parts.append(q_s * G.T @ (targets[:, i] - free) + r_s * D.T @ d)
    H = np.block([[blocks[0], np.zeros((m, m))], [np.zeros((m, m)), blocks[1]]])
    u = np.linalg.solve(H, np.concatenate(rhs_parts))
    joint = np.column_stack([rollout(state.axis(i), u[i * m : (i + 1) * m], params)[1][1:] for i in range(2)])
    plan, _ = step_sequence_track(targets, state, params, q_s, r_s)
    assert np.max(np.abs(plan.steps - joint)) < 1e-10


def test_nominal_state_is_periodic():
    params = HlipParams()
    state = nominal_state(params, 0.12, 0.08, 0, heading=0.5)
    c, s = math.cos(0.5), math.sin(0.5)
    side = 1.0
    steps = [(0.12, -side * 0.16), (0.12, side * 0.16)]
    A, B = s2s_matrices(params)
    xs = [state.x.vector, state.y.vector]
    for fwd, lat in steps:
        u = (c * fwd - s * lat, s * fwd + c * lat)
        xs = [A @ xs[i] + B[:, 0] * u[i] for i in range(2)]
    np.testing.assert_allclose([xs[0][1:], xs[1][1:]], [state.x.vector[1:], state.y.vector[1:]], atol=1e-12)


def test_invalid_params():
    with pytest.raises(ValueError):
        HlipParams(z0=0.0)
    with pytest.raises(ValueError):
        track_axis([], HlipState(), 0.0, HlipParams())
