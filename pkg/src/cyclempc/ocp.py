"""Receding-horizon optimal control problem over the surrogate model.

The decision variables are actuator increments Delta-u for the three
physical actuators; the two feedback entries of the model input are
closed through predicted outputs inside the horizon.  The augmented
per-stage state is [LSTM state (8); previous actuation (3)].

Stage cost, identical at every stage i = 0..N:

    q_imep (r_imep - y_imep)^2 + q_ca50 (r_ca50 - y_ca50)^2
    + r_fuel u_fuel^2 + r_water u_water^2 + q_nox y_nox^2
    + du' R du

Only N input moves exist; stage N holds the last input (du_N = 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    LstmState,
    ModelInput,
    ModelOutput,
    NetworkWeights,
    model_step_arrays,
)

N_ACTUATORS = 3

# IMEP [bar], CA50 [CAD aTDC], NOx [ppm], MPRR [bar/CAD]
DEFAULT_Y_MIN = (1.0, 0.0, 0.0, 0.0)
DEFAULT_Y_MAX = (6.0, 17.0, 500.0, 15.0)
# fuel DOI [ms], water DOI [ms], NVO [CAD]
DEFAULT_U_MIN = (0.0, 0.0, 150.0)
DEFAULT_U_MAX = (1.5, 1.0, 360.0)


@dataclass
class AugmentedState:
    """Controller-side stage state: model state plus held actuation."""

    lstm: LstmState
    u_prev: np.ndarray

    def __post_init__(self):
        self.u_prev = np.asarray(self.u_prev, dtype=float)
        if self.u_prev.shape != (N_ACTUATORS,):
            raise ValueError(f"u_prev must have shape ({N_ACTUATORS},)")

    def as_vector(self) -> np.ndarray:
        """11-vector [c(4), h(4), u_prev(3)]."""
        return np.concatenate([self.lstm.as_vector(), self.u_prev])

    def copy(self) -> "AugmentedState":
        return AugmentedState(self.lstm.copy(), self.u_prev.copy())


@dataclass
class CostWeights:
    q_imep: float = 10.0
    q_ca50: float = 0.5
    q_nox: float = 1e-7
    r_doi_fuel: float = 1e-3
    r_doi_water: float = 1e-3
    r_delta: np.ndarray = field(
        default_factory=lambda: np.array([0.1, 0.1, 1e-4]))

    def __post_init__(self):
        self.r_delta = np.asarray(self.r_delta, dtype=float)
        if self.r_delta.shape != (N_ACTUATORS,):
            raise ValueError("r_delta must have 3 entries")
        for name in ("q_imep", "q_ca50", "q_nox", "r_doi_fuel", "r_doi_water"):
            if getattr(self, name) < 0:
                raise ValueError(f"cost weight {name} must be >= 0")
        if np.any(self.r_delta <= 0):
            raise ValueError("r_delta must be strictly positive")

    def tracking_only(self) -> "CostWeights":
        """Copy with the economic terms (fuel, water, NOx) zeroed."""
        return CostWeights(self.q_imep, self.q_ca50, 0.0, 0.0, 0.0,
                           self.r_delta.copy())


@dataclass
class Bounds:
    """Output and actuator box with 0/1 selectors.

    A zero selector entry removes that channel's constraints from the
    OCP entirely; defaults select everything.
    """

    y_min: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_Y_MIN))
    y_max: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_Y_MAX))
    u_min: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_U_MIN))
    u_max: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_U_MAX))
    select_y: np.ndarray = field(default_factory=lambda: np.ones(4))
    select_u: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.y_min = np.asarray(self.y_min, dtype=float)
        self.y_max = np.asarray(self.y_max, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        self.select_y = np.asarray(self.select_y, dtype=float)
        self.select_u = np.asarray(self.select_u, dtype=float)
        if self.y_min.shape != (4,) or self.y_max.shape != (4,):
            raise ValueError("output bounds must have 4 entries")
        if self.u_min.shape != (3,) or self.u_max.shape != (3,):
            raise ValueError("actuator bounds must have 3 entries")
        if np.any(self.y_max < self.y_min) or np.any(self.u_max < self.u_min):
            raise ValueError("bounds must satisfy min <= max")
        for sel, n in ((self.select_y, 4), (self.select_u, 3)):
            if sel.shape != (n,) or not np.all(np.isin(sel, (0.0, 1.0))):
                raise ValueError("selectors must be 0/1 vectors")

    @property
    def u_range(self) -> np.ndarray:
        return self.u_max - self.u_min


@dataclass
class OcpProblem:
    """One cycle's solver input.

    ``reference`` holds per-stage (r_imep, r_ca50) rows, shape
    (horizon+1, 2).  ``feedback`` is the measured (imep, ca50) of the
    previous cycle, used as the stage-0 model-input feedback pair.
    """

    weights: NetworkWeights
    horizon: int
    cost: CostWeights
    bounds: Bounds
    reference: np.ndarray
    initial: AugmentedState
    feedback: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.reference = np.asarray(self.reference, dtype=float)
        if self.reference.shape != (self.horizon + 1, 2):
            raise ValueError(
                f"reference must have shape ({self.horizon + 1}, 2)")
        self.feedback = np.asarray(self.feedback, dtype=float)
        if self.feedback.shape != (2,):
            raise ValueError("feedback must be the measured (imep, ca50) pair")

    @property
    def n_moves(self) -> int:
        return self.horizon * N_ACTUATORS


def augmented_step(problem: OcpProblem, x: AugmentedState, du,
                   y_feedback):
    """One augmented-model stage: apply du, step the surrogate.

    Within a horizon, ``y_feedback`` for stage i >= 1 is the predicted
    (imep, ca50) of stage i-1; stage 0 uses the measured pair.
    Returns (next AugmentedState, ModelOutput).
    """
    du = np.asarray(du, dtype=float)
    if du.shape != (N_ACTUATORS,):
        raise ValueError("du must have 3 components")
    u = x.u_prev + du
    model_in = np.concatenate([np.asarray(y_feedback, dtype=float)[:2], u])
    next_lstm, y = model_step_arrays(problem.weights, x.lstm, model_in)
    return AugmentedState(next_lstm, u), ModelOutput.from_array(y)


@dataclass
class HorizonTrajectory:
    """Nominal rollout of the horizon at a fixed move sequence.

    states:       per-stage LstmState, length N+1 (state entering stage i)
    inputs:       (N+1, 3) applied actuations; row N repeats row N-1
    model_inputs: (N+1, 5) assembled model inputs per stage
    outputs:      (N+1, 4) predicted outputs
    feedbacks:    (N+1, 2) feedback pairs used per stage
    """

    states: list
    inputs: np.ndarray
    model_inputs: np.ndarray
    outputs: np.ndarray
    feedbacks: np.ndarray


def rollout(problem: OcpProblem, du_seq: np.ndarray) -> HorizonTrajectory:
    """Simulate the horizon for a (N, 3) move sequence (du_N = 0)."""
    n = problem.horizon
    du_seq = np.asarray(du_seq, dtype=float)
    if du_seq.shape != (n, N_ACTUATORS):
        raise ValueError(f"du_seq must have shape ({n}, {N_ACTUATORS})")

    states = [problem.initial.lstm.copy()]
    inputs = np.empty((n + 1, N_ACTUATORS))
    model_inputs = np.empty((n + 1, 5))
    outputs = np.empty((n + 1, 4))
    feedbacks = np.empty((n + 1, 2))

    u = problem.initial.u_prev.copy()
    fb = problem.feedback.copy()
    state = problem.initial.lstm
    for i in range(n + 1):
        if i < n:
            u = u + du_seq[i]
        inputs[i] = u
        feedbacks[i] = fb
        model_in = np.concatenate([fb, u])
        model_inputs[i] = model_in
        state, y = model_step_arrays(problem.weights, state, model_in)
        outputs[i] = y
        states.append(state)
        fb = y[:2]
    return HorizonTrajectory(states, inputs, model_inputs, outputs, feedbacks)


def stage_cost(problem: OcpProblem, y, u, du, stage: int) -> float:
    """Weighted stage cost at one horizon stage."""
    c = problem.cost
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    du = np.asarray(du, dtype=float)
    r_imep, r_ca50 = problem.reference[stage]
    val = (c.q_imep * (r_imep - y[0]) ** 2
           + c.q_ca50 * (r_ca50 - y[1]) ** 2
           + c.q_nox * y[2] ** 2
           + c.r_doi_fuel * u[0] ** 2
           + c.r_doi_water * u[1] ** 2
           + float(du @ (c.r_delta * du)))
    return float(val)


def trajectory_cost(problem: OcpProblem, traj: HorizonTrajectory,
                    du_seq: np.ndarray) -> float:
    n = problem.horizon
    du_seq = np.asarray(du_seq, dtype=float)
    total = 0.0
    zero = np.zeros(N_ACTUATORS)
    for i in range(n + 1):
        du = du_seq[i] if i < n else zero
        total += stage_cost(problem, traj.outputs[i], traj.inputs[i], du, i)
    return total


@dataclass
class ConstraintResiduals:
    """Signed distances to every selected bound (positive = satisfied).

    u_low/u_high: (N, 3), y_low/y_high: (N+1, 4).  Deselected channels
    carry +inf so they never bind.
    """

    u_low: np.ndarray
    u_high: np.ndarray
    y_low: np.ndarray
    y_high: np.ndarray

    def min_residual(self) -> float:
        return float(min(self.u_low.min(), self.u_high.min(),
                         self.y_low.min(), self.y_high.min()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.u_low.ravel(), self.u_high.ravel(),
                               self.y_low.ravel(), self.y_high.ravel()])


def constraint_residuals(problem: OcpProblem,
                         traj: HorizonTrajectory) -> ConstraintResiduals:
    b = problem.bounds
    n = problem.horizon
    u = traj.inputs[:n]
    y = traj.outputs
    mask_u = b.select_u > 0
    mask_y = b.select_y > 0
    u_low = np.where(mask_u, u - b.u_min, np.inf)
    u_high = np.where(mask_u, b.u_max - u, np.inf)
    y_low = np.where(mask_y, y - b.y_min, np.inf)
    y_high = np.where(mask_y, b.y_max - y, np.inf)
    return ConstraintResiduals(u_low, u_high, y_low, y_high)
