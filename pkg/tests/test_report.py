import csv
import os

import pytest

from cyclempc.closed_loop import (run_closed_loop, step_reference_profile,
                                  write_cycles_csv, write_timing_csv)
from cyclempc.controller import ControllerSettings
from cyclempc.report import generate_report, report_from_run_dir
from oracles import make_test_weights

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def run_result():
    weights = make_test_weights(seed=3)
    ref = step_reference_profile(levels=[3.0, 3.8], hold=12)
    return run_closed_loop(weights, ControllerSettings(), ref, seed=4)


def test_generate_report_writes_figures_and_tables(tmp_path, run_result):
    paths = generate_report(run_result.rows, run_result.solve_times,
                            str(tmp_path), budget_s=0.022)
    names = {os.path.basename(p) for p in paths}
    assert {"tracking.png", "actuation.png", "constrained_outputs.png",
            "model_states.png", "timing.png", "tracking.csv",
            "actuation.csv", "constraints.csv", "timing_series.csv",
            "summary.txt"} <= names
    for p in paths:
        assert os.path.getsize(p) > 0
        if p.endswith(".png"):
            with open(p, "rb") as fh:
                assert fh.read(8) == PNG_MAGIC

    with open(tmp_path / "tracking.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cycle", "r_imep", "imep", "imep_error",
                       "r_ca50", "ca50", "ca50_error"]
    assert len(rows) == 1 + len(run_result.rows)

    text = (tmp_path / "summary.txt").read_text()
    assert "load rmse" in text
    assert "budget" in text


def test_report_without_timing_skips_timing_outputs(tmp_path, run_result):
    paths = generate_report(run_result.rows, None, str(tmp_path))
    names = {os.path.basename(p) for p in paths}
    assert "timing.png" not in names
    assert "tracking.png" in names


def test_report_from_run_dir_round_trip(tmp_path, run_result):
    write_cycles_csv(tmp_path / "cycles.csv", run_result.rows)
    write_timing_csv(tmp_path / "timing.csv", run_result.solve_times)
    paths = report_from_run_dir(str(tmp_path), budget_s=0.022)
    assert any(p.endswith("tracking.png") for p in paths)
    assert any(p.endswith("timing.png") for p in paths)


def test_report_from_run_dir_names_missing_prerequisite(tmp_path):
    with pytest.raises(FileNotFoundError, match="run"):
        report_from_run_dir(str(tmp_path))
