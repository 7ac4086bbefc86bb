"""YAML experiment configuration.

One nested document covers the whole pipeline (data generation,
training, control, node timing, plant overrides).  A user file only
needs the keys it changes; everything else comes from DEFAULT_CONFIG,
and unknown keys are rejected rather than silently ignored.  Dotted
``--set`` overrides use the same paths as the YAML structure.
"""

from __future__ import annotations

import copy
from dataclasses import fields

import numpy as np
import yaml

from .controller import ControllerSettings
from .network import NetworkSpec, default_network_spec
from .nodes import NodeConfig
from .ocp import Bounds, CostWeights
from .plant import PlantParams
from .solver import SolverConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "model": {
        "fc_in": [24, 24, 16],
        "fc_out": [24, 24],
    },
    "data": {
        "n_cycles": 20000,
        "seed": 11,
        "train_fraction": 0.8,
        "hold_min": 2,
        "hold_max": 15,
    },
    "training": {
        "window": 32,
        "batch_size": 16,
        "learning_rate": 0.01,
        "lr_min_factor": 0.01,
        "max_epochs": 150,
        "patience": 25,
        "seed": 5,
    },
    "control": {
        "horizon": 3,
        "cost": {
            "q_imep": 10.0,
            "q_ca50": 0.5,
            "q_nox": 1.0e-7,
            "r_doi_fuel": 1.0e-3,
            "r_doi_water": 1.0e-3,
            "r_delta": [0.1, 0.1, 1.0e-4],
        },
        "bounds": {
            "y_min": [1.0, 0.0, 0.0, 0.0],
            "y_max": [6.0, 17.0, 500.0, 15.0],
            "u_min": [0.0, 0.0, 150.0],
            "u_max": [1.5, 1.0, 360.0],
            "select_y": [1, 1, 1, 1],
            "select_u": [1, 1, 1],
        },
        "solver": {
            "max_sqp_iterations": 3,
            "qp_max_iterations": 40,
            "qp_tolerance": 1.0e-12,
            "slack_l1": 1.0e4,
            "slack_l2": 1.0e2,
            "levenberg": 1.0e-8,
            "warm_start": "shift",
        },
    },
    "loop": {
        "seed": 3,
        "profile": {
            "levels": [3.0, 4.5, 2.5, 5.0, 3.5, 2.0, 4.0, 3.0, 5.0, 2.5,
                       4.5, 3.2, 3.8],
            "hold": 50,
            "ca50_ref": 6.0,
        },
    },
    "node": {
        "period_s": 0.080,
        "budget_s": 0.022,
        "idle_timeout_s": 0.2,
        "idle_limit": 25,
        "spin_margin_s": 0.002,
    },
    "plant": {},   # PlantParams field overrides, validated on build
}

# named preset bundles applied before --set overrides
PRESETS = {
    # tighter emissions ceiling; everything else untouched
    "nox300": {"control.bounds.y_max": [6.0, 17.0, 300.0, 15.0]},
}


def _deep_merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in user.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            if path == "plant":   # plant keys validated by PlantParams
                out[key] = val
                continue
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict) and key != "plant":
            if not isinstance(val, dict):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text: str):
    """Split ``a.b.c=value`` into (path tuple, YAML-typed value)."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key.path=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override '{text}' has unparseable value: {exc}")
    return tuple(key.split(".")), value


def apply_override(cfg: dict, path, value) -> None:
    node = cfg
    for i, part in enumerate(path[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(
                f"unknown configuration path: {'.'.join(path[:i + 1])}")
        node = node[part]
    leaf = path[-1]
    in_plant = len(path) >= 1 and path[0] == "plant"
    if not isinstance(node, dict) or (leaf not in node and not in_plant):
        raise ConfigError(f"unknown configuration path: {'.'.join(path)}")
    node[leaf] = value


def load_config(path=None, presets=(), overrides=()) -> dict:
    """Defaults, then the YAML file, then presets, then --set pairs."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("configuration file must hold a mapping")
        cfg = _deep_merge(cfg, user)
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(
                f"unknown preset '{name}'; available: {sorted(PRESETS)}")
        for key, value in PRESETS[name].items():
            apply_override(cfg, tuple(key.split(".")), value)
    for text in overrides:
        p, v = parse_override(text)
        apply_override(cfg, p, v)
    return cfg


def save_config_snapshot(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


# --------------------------------------------------------------------------
# builders: configuration dict -> typed objects


def build_network_spec(cfg: dict) -> NetworkSpec:
    m = cfg["model"]
    return default_network_spec(fc_in=tuple(m["fc_in"]),
                                fc_out=tuple(m["fc_out"]))


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(window=t["window"], batch_size=t["batch_size"],
                       learning_rate=t["learning_rate"],
                       lr_min_factor=t["lr_min_factor"],
                       max_epochs=t["max_epochs"], patience=t["patience"],
                       seed=t["seed"])


def build_cost_weights(cfg: dict) -> CostWeights:
    c = cfg["control"]["cost"]
    return CostWeights(q_imep=c["q_imep"], q_ca50=c["q_ca50"],
                       q_nox=c["q_nox"], r_doi_fuel=c["r_doi_fuel"],
                       r_doi_water=c["r_doi_water"],
                       r_delta=np.asarray(c["r_delta"], dtype=float))


def build_bounds(cfg: dict) -> Bounds:
    b = cfg["control"]["bounds"]
    return Bounds(y_min=np.asarray(b["y_min"], dtype=float),
                  y_max=np.asarray(b["y_max"], dtype=float),
                  u_min=np.asarray(b["u_min"], dtype=float),
                  u_max=np.asarray(b["u_max"], dtype=float),
                  select_y=np.asarray(b["select_y"], dtype=float),
                  select_u=np.asarray(b["select_u"], dtype=float))


def build_solver_config(cfg: dict) -> SolverConfig:
    s = cfg["control"]["solver"]
    return SolverConfig(max_sqp_iterations=s["max_sqp_iterations"],
                        qp_max_iterations=s["qp_max_iterations"],
                        qp_tolerance=s["qp_tolerance"],
                        slack_l1=s["slack_l1"], slack_l2=s["slack_l2"],
                        levenberg=s["levenberg"],
                        warm_start=s["warm_start"])


def build_controller_settings(cfg: dict) -> ControllerSettings:
    return ControllerSettings(horizon=cfg["control"]["horizon"],
                              cost=build_cost_weights(cfg),
                              bounds=build_bounds(cfg),
                              solver=build_solver_config(cfg))


def build_node_config(cfg: dict) -> NodeConfig:
    n = cfg["node"]
    return NodeConfig(period_s=n["period_s"], budget_s=n["budget_s"],
                      idle_timeout_s=n["idle_timeout_s"],
                      idle_limit=n["idle_limit"],
                      spin_margin_s=n["spin_margin_s"])


def build_plant_params(cfg: dict) -> PlantParams:
    overrides = dict(cfg["plant"])
    if not overrides:
        return PlantParams()
    valid = {f.name for f in fields(PlantParams)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown plant parameter(s): {sorted(unknown)}")
    if "noise_std" in overrides:
        overrides["noise_std"] = tuple(overrides["noise_std"])
    return PlantParams().replace(**overrides)


def build_reference(cfg: dict) -> np.ndarray:
    from .closed_loop import step_reference_profile
    p = cfg["loop"]["profile"]
    return step_reference_profile(levels=tuple(p["levels"]), hold=p["hold"],
                                  ca50_ref=p["ca50_ref"])
