import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cyclempc.config import (DEFAULT_CONFIG, build_network_spec,
                             build_plant_params, build_train_config)
from cyclempc.training import generate_dataset, train


@pytest.fixture(scope="session")
def pipeline():
    """Default-config dataset + trained surrogate, built once per session.

    This is the same path the CLI takes with no overrides; the wall
    times are kept because the acceptance budget covers data generation
    and training together.
    """
    cfg = DEFAULT_CONFIG
    data_cfg = cfg["data"]
    t0 = time.perf_counter()
    dataset = generate_dataset(
        build_plant_params(cfg), data_cfg["n_cycles"], seed=data_cfg["seed"],
        train_fraction=data_cfg["train_fraction"],
        hold_range=(data_cfg["hold_min"], data_cfg["hold_max"]))
    data_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    weights, report = train(dataset, build_network_spec(cfg),
                            build_train_config(cfg))
    train_time = time.perf_counter() - t0
    return SimpleNamespace(dataset=dataset, weights=weights, report=report,
                           data_time=data_time, train_time=train_time)
