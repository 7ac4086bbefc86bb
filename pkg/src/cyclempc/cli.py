"""Command-line entry point.

Pipeline: gen-data -> train -> run -> report, with eval and bench as
side checks and plant-node / controller-node for split operation over
UDP.  Every subcommand takes --config/--preset/--set so a run is fully
described by one YAML file plus overrides, and the effective
configuration is snapshotted beside whatever the subcommand writes.
"""

from __future__ import annotations

import argparse
import os
import sys

from .closed_loop import (bench_solver, load_reference_csv, run_closed_loop,
                          write_cycles_csv, write_timing_csv)
from .config import (ConfigError, build_controller_settings,
                     build_network_spec, build_node_config,
                     build_plant_params, build_reference, build_train_config,
                     load_config, save_config_snapshot)
from .nodes import controller_node, plant_node
from .report import report_from_run_dir
from .training import Dataset, evaluate, generate_dataset, train
from .weights_io import export_weights_json, load_weights, save_weights


class CliError(Exception):
    """Raised for user-facing failures; message goes to stderr, exit 2."""


def _require_file(path, what, hint):
    if not os.path.exists(path):
        raise CliError(f"{what} '{path}' not found; {hint}")


def _addr(text):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise CliError(f"expected HOST:PORT, got '{text}'")
    try:
        return host, int(port)
    except ValueError:
        raise CliError(f"bad port in '{text}'") from None


def _load_cfg(args) -> dict:
    if args.config is not None:
        _require_file(args.config, "config file",
                      "pass --config with an existing YAML file")
    return load_config(args.config, presets=args.preset, overrides=args.set)


def _fit_table(report) -> str:
    from .network import OUTPUT_NAMES
    lines = [f"{'output':<10} {'train rmse':>11} {'val rmse':>11} "
             f"{'val nrmse':>10}"]
    for i, name in enumerate(OUTPUT_NAMES):
        lines.append(f"{name:<10} {report.rmse_train[i]:>11.4f} "
                     f"{report.rmse_val[i]:>11.4f} "
                     f"{report.nrmse_val[i]:>9.2f}%")
    return "\n".join(lines)


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    data_cfg = cfg["data"]
    params = build_plant_params(cfg)
    dataset = generate_dataset(
        params, data_cfg["n_cycles"], seed=data_cfg["seed"],
        train_fraction=data_cfg["train_fraction"],
        hold_range=(data_cfg["hold_min"], data_cfg["hold_max"]))
    dataset.to_csv(args.out)
    save_config_snapshot(cfg, args.out + ".config.yaml")
    print(f"wrote {dataset.n_cycles} cycles ({dataset.n_train} train) "
          f"to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.data, "dataset",
                  "generate one with the gen-data subcommand")
    dataset = Dataset.from_csv(args.data)
    weights, report = train(dataset, build_network_spec(cfg),
                            build_train_config(cfg))
    save_weights(weights, args.out)
    if args.json:
        export_weights_json(weights, os.path.splitext(args.out)[0] + ".json")
    save_config_snapshot(cfg, args.out + ".config.yaml")
    print(f"saved {weights.parameter_count} parameters to {args.out} "
          f"(best epoch {report.best_epoch})")
    print(_fit_table(report))
    worst = max(report.nrmse_val)
    print(f"worst validation nrmse: {worst:.2f}%")
    return 0


def _cmd_eval(args) -> int:
    _load_cfg(args)
    _require_file(args.weights, "weights file",
                  "train one with the train subcommand")
    _require_file(args.data, "dataset",
                  "generate one with the gen-data subcommand")
    report = evaluate(load_weights(args.weights), Dataset.from_csv(args.data))
    print(_fit_table(report))
    return 0


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.weights, "weights file",
                  "train one with the train subcommand")
    weights = load_weights(args.weights)
    if args.reference is not None:
        _require_file(args.reference, "reference profile", "expected a CSV "
                      "with header cycle,r_imep,r_ca50 (step-hold rows)")
        reference = load_reference_csv(args.reference)
    else:
        reference = build_reference(cfg)
    settings = build_controller_settings(cfg)
    result = run_closed_loop(weights, settings, reference,
                             plant_params=build_plant_params(cfg),
                             seed=cfg["loop"]["seed"],
                             disable_gc=not args.keep_gc)
    os.makedirs(args.out_dir, exist_ok=True)
    write_cycles_csv(os.path.join(args.out_dir, "cycles.csv"), result.rows)
    write_timing_csv(os.path.join(args.out_dir, "timing.csv"),
                     result.solve_times)
    save_config_snapshot(cfg, os.path.join(args.out_dir, "config.yaml"))
    print(result.report.summary())
    print(f"wrote cycles.csv and timing.csv to {args.out_dir}")
    return 0


def _cmd_report(args) -> int:
    cfg = _load_cfg(args)
    _require_file(os.path.join(args.run_dir, "cycles.csv"), "cycle log",
                  "produce one with the run subcommand")
    paths = report_from_run_dir(args.run_dir, out_dir=args.out_dir,
                                budget_s=cfg["node"]["budget_s"])
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.weights, "weights file",
                  "train one with the train subcommand")
    report = bench_solver(load_weights(args.weights),
                          build_controller_settings(cfg),
                          n_solves=args.solves, seed=cfg["loop"]["seed"],
                          plant_params=build_plant_params(cfg))
    print(f"{report.n_solves} solves per start mode")
    for mode in ("warm", "cold"):
        p50 = getattr(report, f"{mode}_p50")
        p99 = getattr(report, f"{mode}_p99")
        mx = getattr(report, f"{mode}_max")
        its = getattr(report, f"{mode}_qp_iterations_mean")
        print(f"{mode:<5} p50 {1e3 * p50:6.2f} ms  p99 {1e3 * p99:6.2f} ms  "
              f"max {1e3 * mx:6.2f} ms  qp iters {its:.1f}")
    return 0


def _cmd_plant_node(args) -> int:
    cfg = _load_cfg(args)
    settings = build_controller_settings(cfg)
    reference = build_reference(cfg)
    result = plant_node(reference, _addr(args.controller),
                        plant_params=build_plant_params(cfg),
                        seed=cfg["loop"]["seed"],
                        bounds=settings.bounds,
                        bind_addr=_addr(args.bind),
                        config=build_node_config(cfg))
    if args.out_dir is not None:
        os.makedirs(args.out_dir, exist_ok=True)
        import csv as _csv
        from .nodes import PLANT_NODE_HEADER
        path = os.path.join(args.out_dir, "plant_cycles.csv")
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(PLANT_NODE_HEADER)
            for row in result.rows:
                w.writerow([x if isinstance(x, (str, int))
                            else format(x, ".17g") for x in row])
        save_config_snapshot(cfg, os.path.join(args.out_dir, "config.yaml"))
        print(f"wrote {path}")
    print(result.summary())
    return 0


def _cmd_controller_node(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.weights, "weights file",
                  "train one with the train subcommand")
    result = controller_node(load_weights(args.weights),
                             build_controller_settings(cfg),
                             bind_addr=_addr(args.bind),
                             max_decisions=args.max_decisions,
                             config=build_node_config(cfg))
    print(result.summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None,
                        help="YAML configuration file")
    shared.add_argument("--preset", action="append", default=[],
                        metavar="NAME", help="named preset, e.g. nox300")
    shared.add_argument("--set", action="append", default=[],
                        metavar="PATH=VALUE",
                        help="dotted override, e.g. control.horizon=5")

    parser = argparse.ArgumentParser(
        prog="cyclempc",
        description="cycle-to-cycle combustion control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared],
                       help="simulate an excitation run and write a dataset")
    p.add_argument("--out", default="data.csv")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", parents=[shared],
                       help="fit the surrogate model to a dataset")
    p.add_argument("--data", default="data.csv")
    p.add_argument("--out", default="weights.nnw")
    p.add_argument("--json", action="store_true",
                   help="also export the weights as JSON")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", parents=[shared],
                       help="report model fit on a dataset")
    p.add_argument("--weights", default="weights.nnw")
    p.add_argument("--data", default="data.csv")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("run", parents=[shared],
                       help="closed-loop run against the simulated plant")
    p.add_argument("--weights", default="weights.nnw")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--reference", default=None,
                   help="step-hold reference CSV instead of the config "
                        "profile")
    p.add_argument("--keep-gc", action="store_true",
                   help="leave the garbage collector enabled in the loop")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", parents=[shared],
                       help="render figures and tables from a run directory")
    p.add_argument("--run-dir", default="run")
    p.add_argument("--out-dir", default=None,
                   help="write figures here instead of into the run dir")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("bench", parents=[shared],
                       help="solver latency benchmark, warm vs cold starts")
    p.add_argument("--weights", default="weights.nnw")
    p.add_argument("--solves", type=int, default=1000)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("plant-node", parents=[shared],
                       help="paced plant simulator speaking UDP")
    p.add_argument("--controller", required=True, metavar="HOST:PORT")
    p.add_argument("--bind", default="127.0.0.1:0", metavar="HOST:PORT")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=_cmd_plant_node)

    p = sub.add_parser("controller-node", parents=[shared],
                       help="controller service speaking UDP")
    p.add_argument("--weights", default="weights.nnw")
    p.add_argument("--bind", default="127.0.0.1:9833", metavar="HOST:PORT")
    p.add_argument("--max-decisions", type=int, default=None)
    p.set_defaults(fn=_cmd_controller_node)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
