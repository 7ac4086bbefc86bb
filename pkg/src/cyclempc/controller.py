"""Receding-horizon controller state machine.

One class drives both deployment shapes: the in-process closed loop
calls :meth:`CycleController.on_measurement` directly, and the UDP
controller node calls it with decoded frames.  Keeping every piece of
cycle-to-cycle state in here (model state, previous measurement, last
sent actuation, warm start) is what makes the two paths produce the
same actuation byte-for-byte on the same measurement sequence.

Timing convention: the plant applies actuation u(k) during cycle k and
measures y(k) at its end; the model maps [y(k-1), u(k)] to y(k).  When
y(k) arrives, the controller first advances its model state with the
pair it now knows completely ([y(k-1), u(k)]), then optimizes the moves
for u(k+1) onward with y(k) as feedback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import LstmState, ModelInput, NetworkWeights, model_step
from .ocp import (
    N_ACTUATORS,
    AugmentedState,
    Bounds,
    CostWeights,
    OcpProblem,
)
from .solver import SolveResult, SolverConfig, shift_warm_start, solve_ocp


@dataclass
class ControllerSettings:
    horizon: int = 3
    cost: CostWeights = field(default_factory=CostWeights)
    bounds: Bounds = field(default_factory=Bounds)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class ControllerDecision:
    """What one measurement turned into."""

    cycle: int
    actuation: np.ndarray          # (3,) within the actuator box
    status: str                    # solver status for this cycle
    solve_time_s: float
    result: SolveResult


class CycleController:
    """Stateful cycle-to-cycle optimizer.

    ``initial_actuation`` must equal whatever the plant applies before
    the first decision arrives, otherwise the model state advance runs
    on inputs the plant never saw.
    """

    def __init__(self, weights: NetworkWeights,
                 settings: ControllerSettings,
                 initial_actuation):
        u0 = np.asarray(initial_actuation, dtype=float)
        if u0.shape != (N_ACTUATORS,):
            raise ValueError(f"initial_actuation must have shape "
                             f"({N_ACTUATORS},)")
        self.weights = weights
        self.settings = settings
        self._initial_actuation = u0.copy()
        self.reset()

    def reset(self) -> None:
        self.lstm_state = LstmState.zeros()
        self.last_actuation = self._initial_actuation.copy()
        self.prev_measurement = None   # (imep, ca50) of the last cycle
        self._warm = None              # previous move plan, unshifted
        self.cycles_seen = 0

    def on_measurement(self, cycle: int, imep: float, ca50: float,
                       ref_imep: float, ref_ca50: float) -> ControllerDecision:
        """Consume one cycle's measurement, return the next actuation."""
        if not all(np.isfinite(v) for v in (imep, ca50, ref_imep, ref_ca50)):
            raise ValueError("non-finite measurement or reference")

        if self.prev_measurement is not None:
            # catch the model state up through the cycle just measured
            advance_input = ModelInput(self.prev_measurement[0],
                                       self.prev_measurement[1],
                                       *self.last_actuation)
            self.lstm_state, _ = model_step(self.weights, self.lstm_state,
                                            advance_input)
        self.prev_measurement = (imep, ca50)

        s = self.settings
        problem = OcpProblem(
            weights=self.weights,
            horizon=s.horizon,
            cost=s.cost,
            bounds=s.bounds,
            reference=np.tile([ref_imep, ref_ca50], (s.horizon + 1, 1)),
            initial=AugmentedState(lstm=self.lstm_state.copy(),
                                   u_prev=self.last_actuation.copy()),
            feedback=np.array([imep, ca50]),
        )
        warm = None
        if s.solver.warm_start == "shift" and self._warm is not None:
            warm = shift_warm_start(self._warm)
        result = solve_ocp(problem, s.solver, warm_start=warm)

        self._warm = result.delta_u
        self.last_actuation = result.u0.copy()
        self.cycles_seen += 1
        return ControllerDecision(
            cycle=cycle,
            actuation=result.u0.copy(),
            status=result.status,
            solve_time_s=result.solve_time_s,
            result=result,
        )
