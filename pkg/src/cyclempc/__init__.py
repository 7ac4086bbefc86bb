"""Cycle-to-cycle combustion control with a learned surrogate model.

The package splits into model (network, training, weights_io), plant
simulation (plant), optimal control (ocp, solver, controller), loop
execution (closed_loop, nodes, wire) and tooling (config, report, cli).
"""

from .closed_loop import (BenchReport, ClosedLoopReport, ClosedLoopResult,
                          bench_solver, default_initial_actuation,
                          load_reference_csv, read_cycles_csv,
                          run_closed_loop, step_reference_profile,
                          write_cycles_csv, write_timing_csv)
from .config import ConfigError, load_config, save_config_snapshot
from .controller import ControllerDecision, ControllerSettings, CycleController
from .network import (INPUT_NAMES, OUTPUT_NAMES, LstmState, ModelInput,
                      ModelJacobians, ModelOutput, NetworkSpec,
                      NetworkWeights, Normalization, default_network_spec,
                      model_jacobians, model_step, random_weights,
                      zero_weights)
from .nodes import (ControllerNodeResult, CycleClock, LoopbackResult,
                    NodeConfig, PlantNodeResult, controller_node, plant_node,
                    run_split_loopback)
from .ocp import (AugmentedState, Bounds, CostWeights, OcpProblem,
                  rollout, trajectory_cost)
from .plant import Actuation, PlantParams, PlantState, plant_step
from .solver import SolveResult, SolverConfig, solve_ocp, solve_qp
from .training import (Dataset, FitReport, TrainConfig, evaluate,
                       generate_dataset, predict_sequence, train)
from .weights_io import (WeightsChecksumError, WeightsFormatError,
                         WeightsTruncatedError, WeightsVersionError,
                         export_weights_json, load_weights, save_weights)

__version__ = "0.1.0"

__all__ = [
    "Actuation", "AugmentedState", "BenchReport", "Bounds",
    "ClosedLoopReport", "ClosedLoopResult", "ConfigError",
    "ControllerDecision", "ControllerNodeResult", "ControllerSettings",
    "CostWeights", "CycleClock", "CycleController", "Dataset", "FitReport",
    "INPUT_NAMES", "LoopbackResult", "LstmState", "ModelInput",
    "ModelJacobians", "ModelOutput", "NetworkSpec", "NetworkWeights",
    "NodeConfig", "Normalization", "OcpProblem", "OUTPUT_NAMES",
    "PlantNodeResult", "PlantParams", "PlantState", "SolveResult",
    "SolverConfig", "TrainConfig", "WeightsChecksumError",
    "WeightsFormatError", "WeightsTruncatedError", "WeightsVersionError",
    "bench_solver", "controller_node", "default_initial_actuation",
    "default_network_spec", "evaluate", "export_weights_json",
    "generate_dataset", "load_config", "load_reference_csv", "load_weights",
    "model_jacobians", "model_step", "plant_node", "plant_step",
    "predict_sequence", "random_weights", "read_cycles_csv",
    "run_closed_loop", "run_split_loopback", "save_config_snapshot",
    "save_weights", "solve_ocp", "solve_qp", "step_reference_profile",
    "train", "trajectory_cost", "write_cycles_csv", "write_timing_csv",
    "zero_weights",
]
