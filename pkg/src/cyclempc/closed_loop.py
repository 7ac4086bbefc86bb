"""In-process closed loop: surrogate plant driven by the controller.

The loop alternates plant cycles and controller decisions exactly the
way the split UDP topology does, minus the sockets, so its actuation
sequence is the reference the loopback transport is checked against.

CSV layout note: everything in the cycle rows is deterministic for a
given seed and configuration.  Wall-clock solve times go to a separate
timing table so repeated runs diff clean on the cycle data.
"""

from __future__ import annotations

import csv
import gc
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import ControllerSettings, CycleController
from .network import NetworkWeights
from .ocp import DEFAULT_U_MAX, DEFAULT_U_MIN
from .plant import Actuation, PlantParams, PlantState, plant_step


def default_initial_actuation() -> np.ndarray:
    """Mid-box actuation, shared by plant priming and controller init."""
    return 0.5 * (np.asarray(DEFAULT_U_MIN) + np.asarray(DEFAULT_U_MAX))


DEFAULT_STEP_LEVELS = (3.0, 4.5, 2.5, 5.0, 3.5, 2.0, 4.0, 3.0, 5.0, 2.5,
                       4.5, 3.2, 3.8)


def step_reference_profile(levels=DEFAULT_STEP_LEVELS, hold: int = 50,
                           ca50_ref: float = 6.0) -> np.ndarray:
    """(n, 2) piecewise-constant load profile at fixed phasing target."""
    if hold < 1:
        raise ValueError("hold must be >= 1")
    refs = np.repeat(np.asarray(levels, dtype=float), hold)
    out = np.empty((refs.size, 2))
    out[:, 0] = refs
    out[:, 1] = ca50_ref
    return out


def load_reference_csv(path) -> np.ndarray:
    """Read a step-hold profile: columns cycle, r_imep, r_ca50.

    Each row's references hold from its cycle index until the next
    row's; the last row needs a final cycle count, so the file must end
    with a row whose references are ignored (its cycle is the total).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        entries = [(int(row["cycle"]), float(row["r_imep"]),
                    float(row["r_ca50"])) for row in reader]
    if len(entries) < 2:
        raise ValueError("reference csv needs at least a start and end row")
    entries.sort(key=lambda e: e[0])
    if entries[0][0] != 0:
        raise ValueError("reference csv must start at cycle 0")
    total = entries[-1][0]
    out = np.empty((total, 2))
    for (c0, ri, rc), (c1, _, _) in zip(entries, entries[1:]):
        if c1 <= c0:
            raise ValueError("reference csv cycles must strictly increase")
        out[c0:c1, 0] = ri
        out[c0:c1, 1] = rc
    return out


CYCLES_HEADER = (
    "cycle", "r_imep", "r_ca50",
    "imep", "ca50", "nox", "mprr",
    "doi_fuel", "doi_water", "nvo",
    "solver_status", "qp_iterations", "slack_max", "clamp_magnitude",
    "pred_imep", "pred_ca50", "pred_nox", "pred_mprr",
    "c0", "c1", "c2", "c3", "h0", "h1", "h2", "h3",
    "t_res", "y_exceeded", "u_at_bound",
)

TIMING_HEADER = ("cycle", "solve_time_s")


@dataclass
class ClosedLoopReport:
    n_cycles: int
    imep_rmse: float
    ca50_rmse: float
    n_y_exceedances: int
    n_u_at_bound: int
    n_u_violations: int
    status_counts: dict
    aborted: bool
    solve_time_p50: float
    solve_time_p95: float
    solve_time_p99: float
    solve_time_max: float

    def summary(self) -> str:
        lines = [
            f"cycles:               {self.n_cycles}"
            + ("  (ABORTED: diverging plant output)" if self.aborted else ""),
            f"load tracking rmse:   {self.imep_rmse:.4f} bar",
            f"phasing tracking rmse: {self.ca50_rmse:.4f} deg",
            f"output-bound exceedances (plant side): {self.n_y_exceedances}",
            f"actuator cycles at a bound: {self.n_u_at_bound}",
            f"actuator bound violations: {self.n_u_violations}",
            f"solver statuses:      {self.status_counts}",
            f"solve time p50/p95/p99/max: "
            f"{1e3 * self.solve_time_p50:.2f} / {1e3 * self.solve_time_p95:.2f}"
            f" / {1e3 * self.solve_time_p99:.2f} / "
            f"{1e3 * self.solve_time_max:.2f} ms",
        ]
        return "\n".join(lines)


@dataclass
class ClosedLoopResult:
    report: ClosedLoopReport
    rows: list
    solve_times: list = field(default_factory=list)


def run_closed_loop(weights: NetworkWeights, settings: ControllerSettings,
                    reference: np.ndarray, plant_params: PlantParams = None,
                    seed: int = 0, initial_actuation=None,
                    disable_gc: bool = False) -> ClosedLoopResult:
    """Drive the surrogate plant for len(reference) cycles.

    Cycle k: the plant runs with the actuation decided after cycle k-1
    (row k logs it), then the controller turns the new measurement into
    the next cycle's actuation.  ``disable_gc`` freezes the collector
    during the loop the way the real-time nodes do, so solve times are
    comparable with the latency benchmarks.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != 2:
        raise ValueError("reference must be (n_cycles, 2)")
    params = plant_params if plant_params is not None else PlantParams()
    u_init = (default_initial_actuation() if initial_actuation is None
              else np.asarray(initial_actuation, dtype=float))

    controller = CycleController(weights, settings, u_init)
    rng = np.random.default_rng(seed)
    state = PlantState()
    bnd = settings.bounds
    n = reference.shape[0]

    rows = []
    solve_times = []
    status_counts = {}
    sq_imep = 0.0
    sq_ca50 = 0.0
    n_y_exc = 0
    n_at_bound = 0
    n_u_viol = 0
    aborted = False

    u_now = u_init.copy()
    status = "init"
    qp_its = 0
    slack_max = 0.0
    clamp = 0.0
    pred = (float("nan"),) * 4

    gc_was_enabled = gc.isenabled()
    if disable_gc:
        gc.collect()
        gc.disable()
    try:
        for k in range(n):
            state, y = plant_step(state, Actuation.from_array(u_now),
                                  params, rng)
            r_imep, r_ca50 = reference[k]
            sq_imep += (y.imep - r_imep) ** 2
            sq_ca50 += (y.ca50 - r_ca50) ** 2

            y_arr = y.to_array()
            y_exceeded = int(np.any((y_arr < bnd.y_min) & (bnd.select_y > 0))
                             or np.any((y_arr > bnd.y_max)
                                       & (bnd.select_y > 0)))
            n_y_exc += y_exceeded
            at_bound = int(np.any(np.isclose(u_now, bnd.u_min))
                           or np.any(np.isclose(u_now, bnd.u_max)))
            n_at_bound += at_bound
            if np.any(u_now < bnd.u_min) or np.any(u_now > bnd.u_max):
                n_u_viol += 1

            cstate = controller.lstm_state
            rows.append((
                k, r_imep, r_ca50, y.imep, y.ca50, y.nox, y.mprr,
                u_now[0], u_now[1], u_now[2],
                status, qp_its, slack_max, clamp,
                pred[0], pred[1], pred[2], pred[3],
                cstate.c[0], cstate.c[1], cstate.c[2], cstate.c[3],
                cstate.h[0], cstate.h[1], cstate.h[2], cstate.h[3],
                state.t_res, y_exceeded, at_bound,
            ))

            if not np.all(np.isfinite(y_arr)) or abs(y.imep) > 5.0 * (
                    bnd.y_max[0] - bnd.y_min[0]) + bnd.y_max[0]:
                aborted = True
                break

            decision = controller.on_measurement(k, y.imep, y.ca50,
                                                 r_imep, r_ca50)
            u_now = decision.actuation
            status = decision.status
            qp_its = sum(st.qp_iterations
                         for st in decision.result.iteration_stats)
            slack_max = decision.result.slack_max
            clamp = decision.result.clamp_magnitude
            pred = tuple(decision.result.predicted_outputs[0])
            solve_times.append((k, decision.solve_time_s))
            status_counts[status] = status_counts.get(status, 0) + 1
    finally:
        if disable_gc and gc_was_enabled:
            gc.enable()

    n_done = len(rows)
    times = np.array([t for _, t in solve_times]) if solve_times \
        else np.zeros(1)
    report = ClosedLoopReport(
        n_cycles=n_done,
        imep_rmse=float(np.sqrt(sq_imep / max(n_done, 1))),
        ca50_rmse=float(np.sqrt(sq_ca50 / max(n_done, 1))),
        n_y_exceedances=n_y_exc,
        n_u_at_bound=n_at_bound,
        n_u_violations=n_u_viol,
        status_counts=status_counts,
        aborted=aborted,
        solve_time_p50=float(np.percentile(times, 50)),
        solve_time_p95=float(np.percentile(times, 95)),
        solve_time_p99=float(np.percentile(times, 99)),
        solve_time_max=float(times.max()),
    )
    return ClosedLoopResult(report, rows, solve_times)


def write_cycles_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CYCLES_HEADER)
        for row in rows:
            w.writerow([x if isinstance(x, (str, int)) else format(x, ".17g")
                        for x in row])


def write_timing_csv(path, solve_times) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_HEADER)
        for cycle, t in solve_times:
            w.writerow([cycle, format(t, ".9f")])


def read_cycles_csv(path) -> list:
    """Rows back as tuples with the CYCLES_HEADER field types."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CYCLES_HEADER:
            raise ValueError("unexpected cycle table header")
        for raw in reader:
            row = []
            for name, val in zip(CYCLES_HEADER, raw):
                if name == "solver_status":
                    row.append(val)
                elif name in ("cycle", "qp_iterations", "y_exceeded",
                              "u_at_bound"):
                    row.append(int(val))
                else:
                    row.append(float(val))
            out.append(tuple(row))
    return out


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class BenchReport:
    n_solves: int
    warm_p50: float
    warm_p99: float
    warm_max: float
    cold_p50: float
    cold_p99: float
    cold_max: float
    warm_qp_iterations_mean: float
    cold_qp_iterations_mean: float

    def summary(self) -> str:
        return "\n".join([
            f"solves:            {self.n_solves}",
            f"warm p50/p99/max:  {1e3 * self.warm_p50:.2f} / "
            f"{1e3 * self.warm_p99:.2f} / {1e3 * self.warm_max:.2f} ms",
            f"cold p50/p99/max:  {1e3 * self.cold_p50:.2f} / "
            f"{1e3 * self.cold_p99:.2f} / {1e3 * self.cold_max:.2f} ms",
            f"mean QP iterations warm/cold: "
            f"{self.warm_qp_iterations_mean:.2f} / "
            f"{self.cold_qp_iterations_mean:.2f}",
        ])


def bench_solver(weights: NetworkWeights, settings: ControllerSettings,
                 n_solves: int = 1000, seed: int = 0,
                 plant_params: PlantParams = None) -> BenchReport:
    """Time warm- and cold-started solves over a varied reference sweep.

    Runs two identically-seeded closed loops, one with the shift warm
    start and one cold, and reports the wall-clock distribution of each.
    The collector is held off during the timed loops, matching how the
    real-time nodes run.
    """
    rng = np.random.default_rng(seed)
    n_levels = max(2, n_solves // 40)
    levels = rng.uniform(2.0, 5.0, size=n_levels)
    hold = int(np.ceil(n_solves / n_levels))
    reference = step_reference_profile(levels, hold=hold)[:n_solves]

    def run(mode):
        s = ControllerSettings(
            horizon=settings.horizon, cost=settings.cost,
            bounds=settings.bounds,
            solver=replace(settings.solver, warm_start=mode))
        result = run_closed_loop(weights, s, reference,
                                 plant_params=plant_params, seed=seed,
                                 disable_gc=True)
        times = np.array([t for _, t in result.solve_times])
        return times, result

    warm_times, warm_res = run("shift")
    cold_times, cold_res = run("cold")

    qp_col = CYCLES_HEADER.index("qp_iterations")

    def qp_iters(res):
        # row 0 predates the first solve, so it carries no QP count
        counts = [row[qp_col] for row in res.rows[1:]]
        return float(np.mean(counts)) if counts else 0.0

    return BenchReport(
        n_solves=int(warm_times.size),
        warm_p50=float(np.percentile(warm_times, 50)),
        warm_p99=float(np.percentile(warm_times, 99)),
        warm_max=float(warm_times.max()),
        cold_p50=float(np.percentile(cold_times, 50)),
        cold_p99=float(np.percentile(cold_times, 99)),
        cold_max=float(cold_times.max()),
        warm_qp_iterations_mean=qp_iters(warm_res),
        cold_qp_iterations_mean=qp_iters(cold_res),
    )
