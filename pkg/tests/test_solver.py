import csv

import numpy as np
import pytest

from cyclempc.ocp import (Bounds, CostWeights, DEFAULT_U_MAX, DEFAULT_U_MIN,
                          rollout, trajectory_cost)
from cyclempc.solver import (SolverConfig, TELEMETRY_HEADER,
                             _baseline_slacks, append_solve_telemetry,
                             condense, linearize_horizon, shift_warm_start,
                             solve_ocp)
from oracles import make_test_problem, make_test_weights, model_steady_state


@pytest.fixture(scope="module")
def weights():
    return make_test_weights(seed=3)


@pytest.fixture(scope="module")
def problem(weights):
    return make_test_problem(weights)


def test_linearization_matches_finite_differences(problem):
    rng = np.random.default_rng(0)
    du0 = rng.normal(size=(3, 3)) * np.array([0.05, 0.05, 5.0])
    traj = rollout(problem, du0)
    lin = linearize_horizon(problem, traj)
    eps = 1e-6
    worst = 0.0
    for k in range(9):
        d = np.zeros(9)
        d[k] = eps
        tp = rollout(problem, du0 + d.reshape(3, 3))
        tm = rollout(problem, du0 - d.reshape(3, 3))
        fd_y = (tp.outputs - tm.outputs) / (2 * eps)
        fd_u = (tp.inputs - tm.inputs) / (2 * eps)
        worst = max(worst,
                    float(np.max(np.abs(fd_y - lin.jy[:, :, k]))
                          / (1 + np.max(np.abs(fd_y)))),
                    float(np.max(np.abs(fd_u - lin.ju[:, :, k]))))
    assert worst <= 1e-6


def test_condensed_qp_at_zero_equals_nonlinear_cost(problem):
    # with zero moves and minimal feasible slacks the QP objective must
    # reproduce the nonlinear trajectory cost plus the slack penalty
    rng = np.random.default_rng(1)
    cfg = SolverConfig()
    for _ in range(5):
        du0 = rng.normal(size=(3, 3)) * np.array([0.04, 0.04, 4.0])
        traj = rollout(problem, du0)
        lin = linearize_horizon(problem, traj)
        qp = condense(problem, lin, cfg)
        s0 = _baseline_slacks(qp, traj, problem)
        z0 = np.concatenate([np.zeros(qp.n_moves), s0])
        pen = cfg.slack_l1 * s0.sum() + cfg.slack_l2 * (s0 ** 2).sum()
        direct = trajectory_cost(problem, traj, du0) + pen
        assert qp.objective(z0) == pytest.approx(direct, rel=1e-10)


def test_sqp_cost_moves_monotonically_down(problem):
    res = solve_ocp(problem, SolverConfig())
    assert res.status == "ok"
    assert len(res.costs) == 4
    for a, b in zip(res.costs, res.costs[1:]):
        assert b <= a + 1e-9 * max(1.0, abs(a))
    assert res.costs[-1] < res.costs[0]


def test_solution_respects_input_bounds_exactly(weights):
    rng = np.random.default_rng(2)
    for k in range(10):
        p = make_test_problem(
            weights,
            reference=(float(rng.uniform(1.5, 5.5)),
                       float(rng.uniform(3.0, 10.0))),
            feedback=(float(rng.uniform(1.5, 5.5)),
                      float(rng.uniform(2.0, 12.0))),
            u_prev=(float(rng.uniform(0.0, 1.5)),
                    float(rng.uniform(0.0, 1.0)),
                    float(rng.uniform(150.0, 360.0))))
        res = solve_ocp(p, SolverConfig())
        assert np.all(res.inputs >= np.asarray(DEFAULT_U_MIN) - 1e-12), k
        assert np.all(res.inputs <= np.asarray(DEFAULT_U_MAX) + 1e-12), k
        assert np.all(res.u0 >= np.asarray(DEFAULT_U_MIN))
        assert np.all(res.u0 <= np.asarray(DEFAULT_U_MAX))


def test_qp_prediction_respects_output_bounds_when_unslacked(weights):
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(10):
        p = make_test_problem(
            weights,
            reference=(float(rng.uniform(2.0, 5.0)), 6.0),
            feedback=(float(rng.uniform(2.0, 5.0)),
                      float(rng.uniform(4.0, 10.0))))
        res = solve_ocp(p, SolverConfig())
        if res.slack_max <= 1e-9:
            checked += 1
            assert np.all(res.qp_predicted_outputs
                          >= np.asarray(p.bounds.y_min) - 1e-6)
            assert np.all(res.qp_predicted_outputs
                          <= np.asarray(p.bounds.y_max) + 1e-6)
    assert checked > 0


def test_shift_warm_start_layout():
    du = np.arange(9.0).reshape(3, 3)
    shifted = shift_warm_start(du)
    assert np.array_equal(shifted[0], du[1])
    assert np.array_equal(shifted[1], du[2])
    assert np.array_equal(shifted[2], du[2])


def test_warm_started_resolve_does_not_regress(problem):
    cold = solve_ocp(problem, SolverConfig())
    warm = solve_ocp(problem, SolverConfig(),
                     warm_start=shift_warm_start(cold.delta_u))
    assert warm.costs[-1] <= cold.costs[-1] + 1e-6 * max(1.0, cold.costs[-1])


def test_warm_start_shape_validated(problem):
    with pytest.raises(ValueError):
        solve_ocp(problem, SolverConfig(), warm_start=np.zeros((2, 3)))


def test_steady_state_requires_no_move(weights):
    # reference equal to the model's own steady output with matching
    # feedback: the tracking-only controller should command essentially
    # zero actuation change from cold start
    state, y = model_steady_state(weights, (0.8, 0.2, 260.0))
    p = make_test_problem(
        weights,
        cost=CostWeights().tracking_only(),
        reference=(y.imep, y.ca50),
        feedback=(y.imep, y.ca50),
        u_prev=(0.8, 0.2, 260.0),
        lstm=state)
    res = solve_ocp(p, SolverConfig())
    rel = np.max(np.abs(res.delta_u) / Bounds().u_range)
    assert rel <= 1e-6
    assert res.slack_max <= 1e-8


def test_telemetry_appends_per_iteration_rows(problem, tmp_path):
    path = tmp_path / "telemetry.csv"
    res = solve_ocp(problem, SolverConfig())
    append_solve_telemetry(path, 0, res)
    append_solve_telemetry(path, 1, res)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TELEMETRY_HEADER
    assert len(rows) == 1 + 2 * res.iterations
    assert rows[1][0] == "0" and rows[-1][0] == "1"
