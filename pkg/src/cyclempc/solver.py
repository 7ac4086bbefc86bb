"""Gauss-Newton SQP with a condensed interior-point QP.

Real-time-iteration flavour: a fixed number of SQP iterations (default
3), full steps, no line search.  Each iteration linearizes the horizon
rollout around the current move sequence, condenses everything into a
dense QP over the stacked moves plus output-constraint slacks, and
solves it with a Mehrotra predictor-corrector interior-point method.

Actuator box constraints are hard (and exactly linear in the moves, so
they survive condensing without error); output constraints are soft,
with L1 + L2 penalties on two-sided slack variables.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .network import model_jacobians, ModelInput, LstmState
from .ocp import (
    N_ACTUATORS,
    HorizonTrajectory,
    OcpProblem,
    rollout,
    trajectory_cost,
)


class SolverError(Exception):
    pass


class NonFiniteIterateError(SolverError):
    """The SQP produced NaN/Inf and aborted."""


@dataclass
class SolverConfig:
    max_sqp_iterations: int = 3
    qp_max_iterations: int = 40
    # relative: the QP converges to qp_tolerance * (1 + |grad|_inf), and
    # the L1 slack penalty puts |grad|_inf at slack_l1, so the default
    # keeps returned moves parked well under 1e-6 of range at steady state
    qp_tolerance: float = 1e-12
    slack_l1: float = 1e4
    slack_l2: float = 1e2
    levenberg: float = 1e-8
    warm_start: str = "shift"  # "shift" | "cold"

    def __post_init__(self):
        if self.max_sqp_iterations < 1 or self.qp_max_iterations < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.qp_tolerance <= 0 or self.levenberg <= 0:
            raise ValueError("qp_tolerance and levenberg must be positive")
        if self.slack_l1 < 0 or self.slack_l2 <= 0:
            raise ValueError("slack_l1 >= 0 and slack_l2 > 0 required")
        if self.warm_start not in ("shift", "cold"):
            raise ValueError("warm_start must be 'shift' or 'cold'")


@dataclass
class HorizonLinearization:
    """Sensitivities of the rollout w.r.t. the stacked moves.

    ju[i] : (3, n_moves)  d u_i / d moves  (prefix-identity structure)
    jy[i] : (4, n_moves)  d y_i / d moves  (through state, held input
                          and predicted-feedback chains)
    stage_jacobians: raw one-step model jacobians at each nominal stage.
    """

    trajectory: HorizonTrajectory
    ju: np.ndarray
    jy: np.ndarray
    stage_jacobians: list


def linearize_horizon(problem: OcpProblem,
                      traj: HorizonTrajectory) -> HorizonLinearization:
    """Forward-accumulate exact sensitivities along the nominal rollout."""
    n = problem.horizon
    nd = problem.n_moves
    ju = np.zeros((n + 1, N_ACTUATORS, nd))
    jy = np.zeros((n + 1, 4, nd))

    j_u_prev = np.zeros((N_ACTUATORS, nd))
    j_fb = np.zeros((2, nd))          # stage-0 feedback is measured
    j_x = np.zeros((8, nd))           # initial model state is given
    jacs = []
    for i in range(n + 1):
        if i < n:
            j_u = j_u_prev.copy()
            j_u[:, 3 * i:3 * i + 3] += np.eye(N_ACTUATORS)
        else:
            j_u = j_u_prev
        jac = model_jacobians(problem.weights, traj.states[i],
                              ModelInput.from_array(traj.model_inputs[i]))
        jacs.append(jac)
        j_m = np.vstack([j_fb, j_u])  # model input = [feedback, u]
        jy[i] = jac.d_output_d_state @ j_x + jac.d_output_d_input @ j_m
        j_x = jac.d_state_next_d_state @ j_x + jac.d_state_next_d_input @ j_m
        j_fb = jy[i][:2]
        ju[i] = j_u
        j_u_prev = j_u
    return HorizonLinearization(traj, ju, jy, jacs)


@dataclass
class CondensedQp:
    """Dense QP: min 1/2 z'Hz + g'z + offset  s.t.  A z <= b.

    z = [moves (3N), slack_lo, slack_hi] with one slack pair per
    selected output channel per stage.  Move variables are expressed in
    actuator-range units (physical step = move_scale * z) so the three
    channels are equally conditioned; ``offset`` carries the current
    nonlinear cost so the QP objective at z = 0 (with minimal feasible
    slacks) equals the cost at the linearization point.
    """

    hess: np.ndarray
    grad: np.ndarray
    a_ineq: np.ndarray
    b_ineq: np.ndarray
    n_moves: int
    n_slack: int
    offset: float
    slack_map: list = field(default_factory=list)  # (stage, output, side)
    move_scale: np.ndarray | None = None

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.hess @ z + self.grad @ z + self.offset)

    def physical_step(self, z: np.ndarray) -> np.ndarray:
        """Moves in actuator units from a QP solution vector."""
        d = z[:self.n_moves]
        if self.move_scale is not None:
            d = d * self.move_scale
        return d


def condense(problem: OcpProblem, lin: HorizonLinearization,
             config: SolverConfig) -> CondensedQp:
    """Collapse the linearized horizon into the dense move-space QP."""
    n = problem.horizon
    nd = problem.n_moves
    traj = lin.trajectory
    c = problem.cost
    bnd = problem.bounds

    # --- Gauss-Newton cost: residual rows sqrt(w) * (value - target)
    rows = []
    resid = []
    for i in range(n + 1):
        y = traj.outputs[i]
        u = traj.inputs[i]
        r_imep, r_ca50 = problem.reference[i]
        for w_, val, jac_row in (
            (c.q_imep, y[0] - r_imep, lin.jy[i][0]),
            (c.q_ca50, y[1] - r_ca50, lin.jy[i][1]),
            (c.q_nox, y[2], lin.jy[i][2]),
            (c.r_doi_fuel, u[0], lin.ju[i][0]),
            (c.r_doi_water, u[1], lin.ju[i][1]),
        ):
            if w_ == 0.0:
                continue
            sw = np.sqrt(w_)
            rows.append(sw * jac_row)
            resid.append(sw * val)
    # nominal per-stage moves, recovered from the rolled-out inputs
    prev = problem.initial.u_prev
    sqrt_r = np.sqrt(c.r_delta)
    for i in range(n):
        du_nom = traj.inputs[i] - prev
        prev = traj.inputs[i]
        for ch in range(N_ACTUATORS):
            row = np.zeros(nd)
            row[3 * i + ch] = sqrt_r[ch]
            rows.append(row)
            resid.append(sqrt_r[ch] * du_nom[ch])
    jr = np.vstack(rows)
    rho = np.asarray(resid)

    # equilibrate: move variables in actuator-range units
    sc = np.tile(bnd.u_range, n)
    jr = jr * sc

    sel_y = [o for o in range(4) if bnd.select_y[o] > 0]
    slack_map = [(i, o, side) for i in range(n + 1) for o in sel_y
                 for side in ("lo", "hi")]
    ns = len(slack_map)
    nz = nd + ns

    hess = np.zeros((nz, nz))
    hess[:nd, :nd] = 2.0 * (jr.T @ jr)
    hess[nd:, nd:] = 2.0 * config.slack_l2 * np.eye(ns)
    hess += config.levenberg * np.eye(nz)
    hess = 0.5 * (hess + hess.T)

    grad = np.zeros(nz)
    grad[:nd] = 2.0 * (jr.T @ rho)
    grad[nd:] = config.slack_l1

    # --- inequality rows
    a_rows = []
    b_vals = []
    for i in range(n):
        for ch in range(N_ACTUATORS):
            if bnd.select_u[ch] == 0:
                continue
            row = np.zeros(nz)
            row[:nd] = lin.ju[i][ch] * sc
            a_rows.append(row)
            b_vals.append(bnd.u_max[ch] - traj.inputs[i][ch])
            row = np.zeros(nz)
            row[:nd] = -lin.ju[i][ch] * sc
            a_rows.append(row)
            b_vals.append(traj.inputs[i][ch] - bnd.u_min[ch])
    for si, (i, o, side) in enumerate(slack_map):
        row = np.zeros(nz)
        row[nd + si] = -1.0
        if side == "hi":
            row[:nd] = lin.jy[i][o] * sc
            a_rows.append(row)
            b_vals.append(bnd.y_max[o] - traj.outputs[i][o])
        else:
            row[:nd] = -lin.jy[i][o] * sc
            a_rows.append(row)
            b_vals.append(traj.outputs[i][o] - bnd.y_min[o])
    for si in range(ns):
        row = np.zeros(nz)
        row[nd + si] = -1.0
        a_rows.append(row)
        b_vals.append(0.0)

    a_ineq = np.vstack(a_rows) if a_rows else np.zeros((0, nz))
    b_ineq = np.asarray(b_vals)
    offset = float(rho @ rho)
    return CondensedQp(hess, grad, a_ineq, b_ineq, nd, ns, offset,
                       slack_map, move_scale=sc)


# ---------------------------------------------------------------------------
# interior-point QP


@dataclass
class QpSolution:
    z: np.ndarray
    duals: np.ndarray
    status: str              # "converged" | "max_iterations"
    iterations: int
    kkt_stationarity: float
    kkt_primal: float
    kkt_complementarity: float


def _factor(m: np.ndarray):
    """Cholesky with escalating regularization on borderline matrices."""
    reg = 0.0
    for _ in range(6):
        try:
            if reg == 0.0:
                return cho_factor(m, lower=True, check_finite=False)
            return cho_factor(m + reg * np.eye(m.shape[0]), lower=True,
                              check_finite=False)
        except np.linalg.LinAlgError:
            reg = 1e-12 if reg == 0.0 else reg * 100.0
    raise SolverError("KKT system factorization failed")


def _chol_solve(m: np.ndarray, rhs):
    return cho_solve(_factor(m), rhs, check_finite=False)


def qp_kkt_residuals(qp: CondensedQp, z: np.ndarray, duals: np.ndarray):
    """(stationarity, primal violation, complementarity) inf-norms."""
    r_stat = qp.hess @ z + qp.grad + qp.a_ineq.T @ duals
    slack = qp.b_ineq - qp.a_ineq @ z
    r_primal = np.maximum(-slack, 0.0)
    comp = np.abs(duals * slack)
    def nrm(v):
        return float(np.max(np.abs(v))) if v.size else 0.0
    return nrm(r_stat), nrm(r_primal), nrm(comp)


def solve_qp(qp: CondensedQp, config: SolverConfig) -> QpSolution:
    """Mehrotra predictor-corrector primal-dual interior point.

    Deterministic; converges to qp_tolerance scaled by the data
    magnitude.  Status "max_iterations" marks a degraded (but still
    usable) solution.
    """
    h, g, a, b = qp.hess, qp.grad, qp.a_ineq, qp.b_ineq
    n = g.size
    m = b.size
    if m == 0:
        z = _chol_solve(h, -g)
        stat, prim, comp = qp_kkt_residuals(qp, z, np.zeros(0))
        return QpSolution(z, np.zeros(0), "converged", 0, stat, prim, comp)

    scale = 1.0 + float(np.max(np.abs(g)))
    tol = config.qp_tolerance * scale

    z = _chol_solve(h + np.eye(n), -g)
    s_hat = b - a @ z
    s = s_hat + max(1.0, -1.5 * float(s_hat.min()))
    lam = np.ones(m)

    status = "max_iterations"
    it = 0
    for it in range(1, config.qp_max_iterations + 1):
        r_d = h @ z + g + a.T @ lam
        r_p = a @ z + s - b
        mu = float(s @ lam) / m
        if (np.max(np.abs(r_d)) <= tol and np.max(np.abs(r_p)) <= tol
                and mu <= tol):
            status = "converged"
            break
        if not (np.all(np.isfinite(r_d)) and np.all(np.isfinite(r_p))
                and np.isfinite(mu)):
            break  # infeasible or blown-up data; keep last finite iterate

        s_safe = np.maximum(s, 1e-300)  # guards division near degeneracy
        d = np.minimum(lam / s_safe, 1e16)  # cap keeps the system finite
        big = h + a.T @ (d[:, None] * a)
        if not np.all(np.isfinite(big)):
            break  # numerical floor reached; keep last iterate

        try:
            fac = _factor(big)  # one factorization serves both directions

            # predictor (affine) direction
            r_c = lam * s
            rhs = -r_d + a.T @ ((r_c - lam * r_p) / s_safe)
            dz_aff = cho_solve(fac, rhs, check_finite=False)
            ds_aff = -r_p - a @ dz_aff
            dl_aff = -(r_c + lam * ds_aff) / s_safe

            def max_step(v, dv):
                neg = dv < 0
                if not np.any(neg):
                    return 1.0
                return min(1.0, float(np.min(-v[neg] / dv[neg])))

            alpha_p = max_step(s, ds_aff)
            alpha_d = max_step(lam, dl_aff)
            mu_aff = float((s + alpha_p * ds_aff)
                           @ (lam + alpha_d * dl_aff)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

            # corrector
            r_c = lam * s - sigma * mu + ds_aff * dl_aff
            rhs = -r_d + a.T @ ((r_c - lam * r_p) / s_safe)
            dz = cho_solve(fac, rhs, check_finite=False)
            ds = -r_p - a @ dz
            dl = -(r_c + lam * ds) / s_safe
        except SolverError:
            break  # factorization hit the conditioning floor

        alpha = 0.99 * min(max_step(s, ds), max_step(lam, dl))
        if alpha <= 1e-13 or not np.isfinite(alpha):
            break  # stalled on a degenerate face; report residuals as-is
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dl

    stat, prim, comp = qp_kkt_residuals(qp, z, lam)
    return QpSolution(z, lam, status, it, stat, prim, comp)


# ---------------------------------------------------------------------------
# SQP driver


@dataclass
class IterationStats:
    cost: float
    predicted_cost_change: float
    qp_status: str
    qp_iterations: int
    kkt_stationarity: float
    kkt_primal: float
    kkt_complementarity: float
    step_norm: float
    slack_max: float


@dataclass
class SolveResult:
    """Everything one receding-horizon solve produces.

    ``predicted_outputs`` is the nonlinear rollout at the returned
    moves; ``qp_predicted_outputs`` is the final QP's linear prediction,
    the trajectory its output constraints actually bound.
    """

    delta_u: np.ndarray
    u0: np.ndarray
    inputs: np.ndarray
    predicted_outputs: np.ndarray
    qp_predicted_outputs: np.ndarray
    costs: list
    iterations: int
    iteration_stats: list
    status: str                       # "ok" | "degraded" | "aborted"
    slack_max: float
    clamp_magnitude: float
    solve_time_s: float


def shift_warm_start(du_seq: np.ndarray) -> np.ndarray:
    """Shift the move plan one stage, repeating the last stage."""
    du_seq = np.asarray(du_seq, dtype=float)
    return np.vstack([du_seq[1:], du_seq[-1:]])


def _baseline_slacks(qp: CondensedQp, traj, problem: OcpProblem):
    """Minimal feasible slacks at zero move step."""
    s0 = np.zeros(qp.n_slack)
    bnd = problem.bounds
    for si, (i, o, side) in enumerate(qp.slack_map):
        y = traj.outputs[i][o]
        if side == "hi":
            s0[si] = max(0.0, y - bnd.y_max[o])
        else:
            s0[si] = max(0.0, bnd.y_min[o] - y)
    return s0


def solve_ocp(problem: OcpProblem, config: SolverConfig,
              warm_start: np.ndarray | None = None) -> SolveResult:
    """Fixed-iteration SQP solve of one cycle's OCP.

    ``warm_start`` is a (horizon, 3) move plan (typically the previous
    solution shifted); None starts cold at zero moves.
    """
    t0 = time.perf_counter()
    n = problem.horizon
    du = np.zeros((n, N_ACTUATORS)) if warm_start is None \
        else np.array(warm_start, dtype=float, copy=True)
    if du.shape != (n, N_ACTUATORS):
        raise ValueError(f"warm start must have shape ({n}, {N_ACTUATORS})")

    costs = []
    stats = []
    status = "ok"
    lin = None
    last_sol = None
    last_qp = None
    for _ in range(config.max_sqp_iterations):
        traj = rollout(problem, du)
        costs.append(trajectory_cost(problem, traj, du))
        lin = linearize_horizon(problem, traj)
        qp = condense(problem, lin, config)
        sol = solve_qp(qp, config)
        step = qp.physical_step(sol.z).reshape(n, N_ACTUATORS)
        if not np.all(np.isfinite(step)):
            status = "aborted"
            break
        z0 = np.concatenate([np.zeros(qp.n_moves),
                             _baseline_slacks(qp, traj, problem)])
        predicted_change = qp.objective(sol.z) - qp.objective(z0)
        du = du + step
        if sol.status != "converged":
            status = "degraded"
        slack_max = float(np.max(sol.z[qp.n_moves:])) if qp.n_slack else 0.0
        stats.append(IterationStats(
            cost=costs[-1],
            predicted_cost_change=predicted_change,
            qp_status=sol.status,
            qp_iterations=sol.iterations,
            kkt_stationarity=sol.kkt_stationarity,
            kkt_primal=sol.kkt_primal,
            kkt_complementarity=sol.kkt_complementarity,
            step_norm=float(np.max(np.abs(step))),
            slack_max=slack_max,
        ))
        last_sol, last_qp = sol, qp

    final_traj = rollout(problem, du)
    costs.append(trajectory_cost(problem, final_traj, du))

    if last_sol is not None and last_qp is not None:
        d_last = last_qp.physical_step(last_sol.z)
        qp_pred = lin.trajectory.outputs + lin.jy @ d_last
        final_slack_max = float(np.max(last_sol.z[last_qp.n_moves:])) \
            if last_qp.n_slack else 0.0
    else:
        qp_pred = final_traj.outputs.copy()
        final_slack_max = 0.0

    bnd = problem.bounds
    u0_raw = final_traj.inputs[0]
    u0 = np.clip(u0_raw, bnd.u_min, bnd.u_max)
    clamp = float(np.max(np.abs(u0 - u0_raw)))

    return SolveResult(
        delta_u=du,
        u0=u0,
        inputs=final_traj.inputs[:n].copy(),
        predicted_outputs=final_traj.outputs.copy(),
        qp_predicted_outputs=qp_pred,
        costs=costs,
        iterations=len(stats),
        iteration_stats=stats,
        status=status,
        slack_max=final_slack_max,
        clamp_magnitude=clamp,
        solve_time_s=time.perf_counter() - t0,
    )


TELEMETRY_HEADER = ("solve", "iteration", "cost", "predicted_cost_change",
                    "qp_status", "qp_iterations", "kkt_stationarity",
                    "kkt_primal", "kkt_complementarity", "step_norm",
                    "slack_max", "solve_time_s")


def append_solve_telemetry(path, solve_index: int, result: SolveResult) -> None:
    """Append one solve's per-iteration rows to a CSV log."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(TELEMETRY_HEADER)
        for k, st in enumerate(result.iteration_stats):
            w.writerow([solve_index, k, format(st.cost, ".17g"),
                        format(st.predicted_cost_change, ".17g"),
                        st.qp_status, st.qp_iterations,
                        format(st.kkt_stationarity, ".6g"),
                        format(st.kkt_primal, ".6g"),
                        format(st.kkt_complementarity, ".6g"),
                        format(st.step_norm, ".6g"),
                        format(st.slack_max, ".6g"),
                        format(result.solve_time_s, ".6g")])
