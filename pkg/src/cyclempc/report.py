"""Render a run directory into figures and plot-ready tables.

Input is the cycle table (and optionally the timing table) a closed
loop or plant node wrote; output is a set of PNG figures plus tidy CSVs
holding exactly the series each figure draws, so downstream tooling can
re-plot without re-parsing the full cycle log.
"""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .closed_loop import CYCLES_HEADER, read_cycles_csv


def _col(rows, name):
    idx = CYCLES_HEADER.index(name)
    return np.array([r[idx] for r in rows], dtype=float)


def _scol(rows, name):
    idx = CYCLES_HEADER.index(name)
    return [r[idx] for r in rows]


def _write_csv(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([x if isinstance(x, (str, int)) else
                        format(x, ".10g") for x in row])


def _tracking_figure(rows, out_png):
    cyc = _col(rows, "cycle")
    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    axes[0].plot(cyc, _col(rows, "imep"), lw=0.8, label="measured")
    axes[0].plot(cyc, _col(rows, "r_imep"), lw=1.2, ls="--",
                 label="reference")
    axes[0].set_ylabel("load (bar)")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].plot(cyc, _col(rows, "ca50"), lw=0.8, label="measured")
    axes[1].plot(cyc, _col(rows, "r_ca50"), lw=1.2, ls="--",
                 label="reference")
    axes[1].set_ylabel("phasing (deg)")
    axes[1].set_xlabel("cycle")
    axes[1].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def _actuation_figure(rows, out_png):
    cyc = _col(rows, "cycle")
    names = [("doi_fuel", "fuel pulse (ms)"),
             ("doi_water", "water pulse (ms)"),
             ("nvo", "valve overlap (deg)")]
    fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
    for ax, (col, label) in zip(axes, names):
        ax.step(cyc, _col(rows, col), where="post", lw=0.9)
        ax.set_ylabel(label)
    axes[-1].set_xlabel("cycle")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def _constraint_figure(rows, out_png):
    cyc = _col(rows, "cycle")
    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    axes[0].plot(cyc, _col(rows, "nox"), lw=0.8)
    axes[0].set_ylabel("NOx (ppm)")
    axes[1].plot(cyc, _col(rows, "mprr"), lw=0.8)
    axes[1].set_ylabel("pressure-rise rate (bar/deg)")
    axes[1].set_xlabel("cycle")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def _state_figure(rows, out_png):
    cyc = _col(rows, "cycle")
    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for i in range(4):
        axes[0].plot(cyc, _col(rows, f"c{i}"), lw=0.7, label=f"c{i}")
        axes[1].plot(cyc, _col(rows, f"h{i}"), lw=0.7, label=f"h{i}")
    axes[0].set_ylabel("cell state")
    axes[0].legend(loc="upper right", fontsize=7, ncol=4)
    axes[1].set_ylabel("hidden state")
    axes[1].set_xlabel("cycle")
    axes[1].legend(loc="upper right", fontsize=7, ncol=4)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def _timing_figure(timing, budget_s, out_png):
    cycles = np.array([c for c, _ in timing])
    times = 1e3 * np.array([t for _, t in timing])
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot(cycles, times, ".", ms=2)
    if budget_s is not None:
        axes[0].axhline(1e3 * budget_s, color="tab:red", lw=1.0,
                        label=f"budget {1e3 * budget_s:.0f} ms")
        axes[0].legend(fontsize=8)
    axes[0].set_xlabel("cycle")
    axes[0].set_ylabel("solve time (ms)")
    axes[1].hist(times, bins=40)
    axes[1].set_xlabel("solve time (ms)")
    axes[1].set_ylabel("count")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def generate_report(rows, timing=None, out_dir=".", budget_s=None) -> list:
    """Write figures + tables for one run; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def out(name):
        p = os.path.join(out_dir, name)
        paths.append(p)
        return p

    cyc = _col(rows, "cycle")
    _tracking_figure(rows, out("tracking.png"))
    _write_csv(out("tracking.csv"),
               ("cycle", "r_imep", "imep", "imep_error",
                "r_ca50", "ca50", "ca50_error"),
               (cyc, _col(rows, "r_imep"), _col(rows, "imep"),
                _col(rows, "imep") - _col(rows, "r_imep"),
                _col(rows, "r_ca50"), _col(rows, "ca50"),
                _col(rows, "ca50") - _col(rows, "r_ca50")))

    _actuation_figure(rows, out("actuation.png"))
    _write_csv(out("actuation.csv"),
               ("cycle", "doi_fuel", "doi_water", "nvo"),
               (cyc, _col(rows, "doi_fuel"), _col(rows, "doi_water"),
                _col(rows, "nvo")))

    _constraint_figure(rows, out("constrained_outputs.png"))
    _write_csv(out("constraints.csv"),
               ("cycle", "nox", "mprr", "y_exceeded", "u_at_bound",
                "slack_max"),
               (cyc, _col(rows, "nox"), _col(rows, "mprr"),
                _col(rows, "y_exceeded"), _col(rows, "u_at_bound"),
                _col(rows, "slack_max")))

    _state_figure(rows, out("model_states.png"))

    if timing:
        _timing_figure(timing, budget_s, out("timing.png"))
        _write_csv(out("timing_series.csv"), ("cycle", "solve_time_ms"),
                   (np.array([c for c, _ in timing]),
                    1e3 * np.array([t for _, t in timing])))

    # compact numbers for humans
    imep_err = _col(rows, "imep") - _col(rows, "r_imep")
    ca50_err = _col(rows, "ca50") - _col(rows, "r_ca50")
    lines = [
        f"cycles: {len(rows)}",
        f"load rmse:    {float(np.sqrt(np.mean(imep_err ** 2))):.4f} bar",
        f"phasing rmse: {float(np.sqrt(np.mean(ca50_err ** 2))):.4f} deg",
        f"output-bound exceedances: {int(_col(rows, 'y_exceeded').sum())}",
        f"cycles with an actuator at a bound: "
        f"{int(_col(rows, 'u_at_bound').sum())}",
    ]
    if timing:
        times = np.array([t for _, t in timing])
        lines.append(
            f"solve time p50/p95/p99/max: "
            f"{1e3 * np.percentile(times, 50):.2f} / "
            f"{1e3 * np.percentile(times, 95):.2f} / "
            f"{1e3 * np.percentile(times, 99):.2f} / "
            f"{1e3 * times.max():.2f} ms")
        if budget_s is not None:
            lines.append(f"budget: {1e3 * budget_s:.1f} ms, over-budget "
                         f"solves: {int((times > budget_s).sum())}")
    summary_path = out("summary.txt")
    with open(summary_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths


def report_from_run_dir(run_dir, out_dir=None, budget_s=None) -> list:
    """Load cycles.csv (+ timing.csv if present) and render the report."""
    cycles_path = os.path.join(run_dir, "cycles.csv")
    if not os.path.exists(cycles_path):
        raise FileNotFoundError(
            f"{cycles_path} not found; generate it with the `run` "
            f"subcommand first")
    rows = read_cycles_csv(cycles_path)
    timing = None
    timing_path = os.path.join(run_dir, "timing.csv")
    if os.path.exists(timing_path):
        timing = []
        with open(timing_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for cyc, t in reader:
                timing.append((int(cyc), float(t)))
    return generate_report(rows, timing,
                           out_dir if out_dir is not None else run_dir,
                           budget_s=budget_s)
