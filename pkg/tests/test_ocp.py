import numpy as np
import pytest

from cyclempc.network import LstmState, ModelInput, model_step
from cyclempc.ocp import (AugmentedState, Bounds, CostWeights,
                          DEFAULT_U_MAX, DEFAULT_U_MIN, DEFAULT_Y_MAX,
                          DEFAULT_Y_MIN, constraint_residuals, rollout,
                          trajectory_cost)
from oracles import make_test_problem, make_test_weights


@pytest.fixture(scope="module")
def weights():
    return make_test_weights(seed=3)


def random_moves(rng, horizon=3):
    return rng.normal(size=(horizon, 3)) * np.array([0.05, 0.05, 5.0])


def test_default_boxes():
    assert tuple(DEFAULT_Y_MIN) == (1.0, 0.0, 0.0, 0.0)
    assert tuple(DEFAULT_Y_MAX) == (6.0, 17.0, 500.0, 15.0)
    assert tuple(DEFAULT_U_MIN) == (0.0, 0.0, 150.0)
    assert tuple(DEFAULT_U_MAX) == (1.5, 1.0, 360.0)
    assert Bounds().u_range == pytest.approx([1.5, 1.0, 210.0])


def test_rollout_shapes_and_held_last_input(weights):
    p = make_test_problem(weights, horizon=4)
    du = random_moves(np.random.default_rng(0), horizon=4)
    traj = rollout(p, du)
    assert traj.outputs.shape == (5, 4)
    assert traj.inputs.shape == (5, 3)
    assert traj.feedbacks.shape == (5, 2)
    assert len(traj.states) == 6
    # terminal stage holds the last actuation (no fifth move)
    assert np.array_equal(traj.inputs[4], traj.inputs[3])


def test_rollout_inputs_are_cumulative_moves(weights):
    p = make_test_problem(weights)
    du = random_moves(np.random.default_rng(1))
    traj = rollout(p, du)
    expect = p.initial.u_prev + np.cumsum(du, axis=0)
    assert traj.inputs[:3] == pytest.approx(expect, abs=1e-15)


def test_rollout_threads_predicted_feedback(weights):
    # stage 0 sees the plant measurement; later stages must close the
    # loop through the model's own predicted load and phasing
    p = make_test_problem(weights, feedback=(2.7, 9.4))
    du = random_moves(np.random.default_rng(2))
    traj = rollout(p, du)
    assert np.array_equal(traj.feedbacks[0], [2.7, 9.4])
    for i in range(1, traj.outputs.shape[0]):
        assert np.array_equal(traj.feedbacks[i], traj.outputs[i - 1, :2])
        assert np.array_equal(traj.model_inputs[i, :2], traj.feedbacks[i])
        assert np.array_equal(traj.model_inputs[i, 2:], traj.inputs[i])


def test_rollout_matches_manual_model_chain(weights):
    p = make_test_problem(weights)
    du = random_moves(np.random.default_rng(3))
    traj = rollout(p, du)
    state = LstmState(c=p.initial.lstm.c.copy(), h=p.initial.lstm.h.copy())
    fb = p.feedback.copy()
    u = p.initial.u_prev.copy()
    for i in range(4):
        if i < 3:
            u = u + du[i]
        state, y = model_step(weights, state,
                              ModelInput(fb[0], fb[1], *u))
        assert y.to_array() == pytest.approx(traj.outputs[i], abs=1e-14)
        fb = y.to_array()[:2]


def test_trajectory_cost_matches_hand_formula(weights):
    p = make_test_problem(weights, horizon=2, reference=(3.2, 7.0))
    du = random_moves(np.random.default_rng(4), horizon=2)
    traj = rollout(p, du)
    c = p.cost
    total = 0.0
    for i in range(3):
        y = traj.outputs[i]
        u = traj.inputs[i]
        d = du[i] if i < 2 else np.zeros(3)
        total += (c.q_imep * (3.2 - y[0]) ** 2
                  + c.q_ca50 * (7.0 - y[1]) ** 2
                  + c.q_nox * y[2] ** 2
                  + c.r_doi_fuel * u[0] ** 2
                  + c.r_doi_water * u[1] ** 2
                  + float(d @ (np.asarray(c.r_delta) * d)))
    assert trajectory_cost(p, traj, du) == pytest.approx(total, rel=1e-14)


def test_tracking_only_zeroes_economic_terms():
    base = CostWeights()
    t = base.tracking_only()
    assert t.q_imep == base.q_imep
    assert t.q_ca50 == base.q_ca50
    assert t.q_nox == 0.0
    assert t.r_doi_fuel == 0.0
    assert t.r_doi_water == 0.0
    # the original is untouched
    assert base.q_nox > 0.0


def test_constraint_residuals_sign_convention(weights):
    p = make_test_problem(weights)
    traj = rollout(p, np.zeros((3, 3)))
    res = constraint_residuals(p, traj)
    assert res.u_low == pytest.approx(traj.inputs[:3] - DEFAULT_U_MIN)
    assert res.u_high == pytest.approx(np.asarray(DEFAULT_U_MAX) - traj.inputs[:3])
    assert res.y_low == pytest.approx(traj.outputs - DEFAULT_Y_MIN)
    assert res.y_high == pytest.approx(np.asarray(DEFAULT_Y_MAX) - traj.outputs)
    assert res.min_residual() == pytest.approx(res.flat().min())


def test_deselected_outputs_never_bind(weights):
    p = make_test_problem(weights, bounds=Bounds(select_y=np.zeros(4)))
    traj = rollout(p, np.zeros((3, 3)))
    res = constraint_residuals(p, traj)
    assert np.all(np.isinf(res.y_low)) and np.all(res.y_low > 0)
    assert np.all(np.isinf(res.y_high)) and np.all(res.y_high > 0)


def test_augmented_state_vector_layout():
    s = AugmentedState(lstm=LstmState(c=np.arange(4.0), h=np.arange(4.0) + 10),
                       u_prev=np.array([0.5, 0.2, 200.0]))
    v = s.as_vector()
    assert v.shape == (11,)
    assert np.array_equal(v[:4], [0.0, 1.0, 2.0, 3.0])
    assert np.array_equal(v[4:8], [10.0, 11.0, 12.0, 13.0])
    assert np.array_equal(v[8:], [0.5, 0.2, 200.0])
    c = s.copy()
    c.u_prev[0] = 9.0
    assert s.u_prev[0] == 0.5
