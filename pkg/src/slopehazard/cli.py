"""Command-line surface: reproducible end-to-end runs over the library.

Every command is a pure function of its input files, its resolved
configuration, and the seed: rerunning with the same three produces
byte-identical outputs.  The resolved configuration (defaults applied)
is written next to the outputs of each run.

Exit codes: 0 success, 1 computation failure, 2 usage or configuration
error.  Failures print one line of JSON to stderr with the shape
{"error": {"kind": "usage" | "computation", "message": ...}}.

This module imports only the standard library at the top level so that
--threads (or the HAZ_THREADS environment variable) can pin the BLAS
thread pools before the numerical libraries initialize; the heavy
imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

__all__ = ["main"]

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")

_DEFAULT_SEVERITIES = (0.05, 0.5, 0.95)
_DEFAULT_PERIODS = (5.0, 10.0, 15.0, 20.0)


class UsageError(ValueError):
    """Bad invocation or configuration; exits with code 2."""


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps(
        {"error": {"kind": kind, "message": message}}) + "\n")
    return code


def _require(config: dict, key: str, kind=None):
    if key not in config:
        raise UsageError(f"config is missing required key {key!r}")
    value = config[key]
    if kind is not None and not isinstance(value, kind):
        raise UsageError(f"config key {key!r} has the wrong type")
    return value


def _input_path(config: dict, key: str) -> str:
    path = _require(config, key, str)
    if not os.path.exists(path):
        raise UsageError(f"config key {key!r}: missing input file: {path}")
    return path


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_resolved(config: dict, subcommand: str, seed: int, out_dir: str) -> None:
    _write_json({"subcommand": subcommand, "seed": seed, "config": config},
                os.path.join(out_dir, "resolved_config.json"))


def _train_config(config: dict):
    from dataclasses import fields, replace

    from .training import TrainConfig

    overrides = config.get("train", {})
    if not isinstance(overrides, dict):
        raise UsageError("config key 'train' must be an object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown train config keys: {unknown}")
    return replace(TrainConfig(), **overrides)


def _severities(config: dict) -> list[float]:
    values = config.get("severities", list(_DEFAULT_SEVERITIES))
    if not isinstance(values, list) or not values:
        raise UsageError("config key 'severities' must be a nonempty list")
    out = [float(q) for q in values]
    if any(not 0.0 < q < 1.0 for q in out):
        raise UsageError("severity levels must lie in (0, 1)")
    return out


def _periods(config: dict) -> list[float]:
    values = config.get("periods", list(_DEFAULT_PERIODS))
    if not isinstance(values, list) or not values:
        raise UsageError("config key 'periods' must be a nonempty list")
    out = [float(p) for p in values]
    if any(p <= 0 for p in out):
        raise UsageError("return periods must be positive")
    return out


def _format_cell(value: float) -> str:
    return f"{value:g}"


def cmd_fit(config: dict, out_dir: str, seed: int) -> None:
    """Split, train, and evaluate on the held-out test split.

    Writes model.json, trace.csv (epoch, train_loss, val_loss, val_auc,
    val_crps), and report.json.
    """
    from .data import _format_float, load_dataset, load_schema
    from .evaluation import evaluation_report
    from .network import save_model
    from .training import train

    schema = load_schema(_input_path(config, "schema"))
    dataset, _ = load_dataset(_input_path(config, "dataset"), schema)
    train_config = _train_config(config)
    epochs = int(config.get("epochs", 200))

    result = train(dataset, train_config, epochs, seed)
    save_model(result.model, os.path.join(out_dir, "model.json"))
    with open(os.path.join(out_dir, "trace.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_auc", "val_crps"])
        for row in result.trace:
            writer.writerow([row.epoch, _format_float(row.train_loss),
                             _format_float(row.val_loss),
                             _format_float(row.val_auc),
                             _format_float(row.val_crps)])
    report = evaluation_report(result.model, result.test_data)
    report["best_epoch"] = result.best_epoch
    report["best_val_loss"] = result.best_val_loss
    _write_json(report, os.path.join(out_dir, "report.json"))

    from dataclasses import asdict
    resolved = dict(config)
    resolved["train"] = asdict(train_config)
    resolved["epochs"] = epochs
    _write_resolved(resolved, "fit", seed, out_dir)


def cmd_simulate(config: dict, out_dir: str, seed: int) -> None:
    """Draw a dataset from a known generator; writes dataset.csv,
    schema.json, and truth.json."""
    from .data import (GeneratorSpec, quickstart_generator, save_dataset,
                       save_schema, simulate)

    n_sites = int(_require(config, "n_sites", int))
    n_years = int(_require(config, "n_years", int))
    if "generator" in config:
        truth = GeneratorSpec.from_json_obj(_require(config, "generator", dict))
        generator_note = "explicit"
    else:
        quickstart_seed = int(config.get("quickstart_seed", 0))
        truth = quickstart_generator(quickstart_seed)
        generator_note = f"quickstart(seed={quickstart_seed})"
    dataset, truth_record = simulate(n_sites, n_years, truth, seed)
    save_dataset(dataset, os.path.join(out_dir, "dataset.csv"))
    save_schema(truth.schema, os.path.join(out_dir, "schema.json"))
    _write_json(truth_record, os.path.join(out_dir, "truth.json"))

    resolved = dict(config)
    resolved.setdefault("quickstart_seed", 0)
    resolved["generator_note"] = generator_note
    _write_resolved(resolved, "simulate", seed, out_dir)


def cmd_evaluate(config: dict, out_dir: str, seed: int) -> None:
    """Score a saved model on a dataset; writes report.json plus ROC and
    Q-Q point tables."""
    from .data import load_dataset
    from .evaluation import (auc, evaluation_report, qq_data, write_qq_csv,
                             write_roc_csv)
    from .network import load_model

    model = load_model(_input_path(config, "model"))
    dataset, _ = load_dataset(_input_path(config, "dataset"), model.schema)
    report = evaluation_report(model, dataset)
    _write_json(report, os.path.join(out_dir, "report.json"))
    roc = auc(model.predict(dataset.X).p, dataset.labels)
    write_roc_csv(roc, os.path.join(out_dir, "roc.csv"))
    if report["qq"] is not None:
        import numpy as np
        write_qq_csv(qq_data(model, dataset, np.linspace(0.01, 0.99, 99)),
                     os.path.join(out_dir, "qq.csv"))
    _write_resolved(dict(config), "evaluate", seed, out_dir)


def cmd_tune_gamma(config: dict, out_dir: str, seed: int) -> None:
    """Sweep the loss-balance weight; writes tune.csv (one row per grid
    value) and report.json with the selection."""
    from dataclasses import asdict

    from .data import _format_float, load_dataset, load_schema
    from .training import tune_gamma

    schema = load_schema(_input_path(config, "schema"))
    dataset, _ = load_dataset(_input_path(config, "dataset"), schema)
    train_config = _train_config(config)
    if train_config.val_crps_max_records < 1:
        raise UsageError("config key 'train.val_crps_max_records' must be "
                         "positive: gamma selection scores CRPS")
    epochs = int(config.get("epochs", 20))
    grid = config.get("grid")
    if grid is not None and (not isinstance(grid, list) or not grid):
        raise UsageError("config key 'grid' must be a nonempty list")

    result = tune_gamma(dataset, grid, config=train_config, epochs=epochs,
                        seed=seed)
    with open(os.path.join(out_dir, "tune.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gamma", "auc", "crps_mean", "error"])
        for row in result.rows:
            writer.writerow([_format_float(row.gamma), _format_float(row.auc),
                             _format_float(row.crps_mean), row.error or ""])
    _write_json({"best_gamma": result.best_gamma,
                 "rows": [{"gamma": r.gamma, "auc": r.auc,
                           "crps_mean": r.crps_mean, "error": r.error}
                          for r in result.rows]},
                os.path.join(out_dir, "report.json"))

    resolved = dict(config)
    resolved["train"] = asdict(train_config)
    resolved["epochs"] = epochs
    _write_resolved(resolved, "tune-gamma", seed, out_dir)


def cmd_return_levels(config: dict, out_dir: str, seed: int) -> None:
    """Fit annual-max and annual-mean frequency models and emit the
    combined return-level table.

    Sites with a constant series cannot identify the frequency model;
    they are excluded up front, listed in report.json, and the rest are
    still emitted.
    """
    import numpy as np

    from .frequency import (FrequencyFitError, build_return_level_sets,
                            fit_frequency, read_trigger_series,
                            write_return_level_sets)

    periods = _periods(config)
    n_y = int(config.get("n_y", 1))
    max_series, mean_series, aggregate = read_trigger_series(
        _input_path(config, "trigger_series"))

    excluded = []
    for site in sorted(max_series):
        reasons = []
        if np.ptp(max_series[site]) == 0.0:
            reasons.append("constant annual_max series")
        if np.ptp(mean_series[site]) == 0.0:
            reasons.append("constant annual_mean series")
        if reasons:
            excluded.append({"site": site, "reason": "; ".join(reasons)})
            del max_series[site]
            del mean_series[site]
    if not max_series:
        raise FrequencyFitError("every site was excluded as degenerate",
                                phase="validate")

    max_model = fit_frequency(max_series, "annual_max", n_y)
    mean_model = fit_frequency(mean_series, "annual_mean", n_y)
    sets = build_return_level_sets(max_model, mean_model, aggregate, periods)
    write_return_level_sets(sets, os.path.join(out_dir, "return_levels.csv"))
    _write_json({
        "excluded_sites": excluded,
        "annual_max": {"kappa": max_model.kappa, "xi": max_model.xi,
                       "scales": max_model.scales},
        "annual_mean": {"kappa": mean_model.kappa, "xi": mean_model.xi,
                        "scales": mean_model.scales},
    }, os.path.join(out_dir, "report.json"))

    resolved = dict(config)
    resolved["periods"] = periods
    resolved["n_y"] = n_y
    _write_resolved(resolved, "return-levels", seed, out_dir)


def cmd_hazard(config: dict, out_dir: str, seed: int) -> None:
    """Hypothesised hazard surfaces: one CSV per (q, P) plus a combined
    long-format file.

    Severity thresholds come either from explicit (q, a_q) pairs in the
    config or from the positive area densities of a dataset read with
    the model's schema.
    """
    from .data import load_dataset
    from .frequency import read_return_level_sets
    from .hazard import (SeverityThreshold, hypothesised_hazard,
                         read_site_covariates, severity_threshold,
                         write_hazard_surfaces)
    from .network import load_model

    severities = _severities(config)
    periods = _periods(config) if "periods" in config else None
    scenario = config.get("scenario", "historical")

    model = load_model(_input_path(config, "model"))
    return_levels = read_return_level_sets(_input_path(config, "return_levels"))
    static, ndvi = read_site_covariates(_input_path(config, "site_covariates"))

    if "thresholds" in config:
        pairs = _require(config, "thresholds", list)
        thresholds = [SeverityThreshold(float(t["q"]), float(t["a_q"]))
                      for t in pairs]
        if sorted(t.q for t in thresholds) != sorted(severities):
            raise UsageError("explicit thresholds must cover the severity list")
    else:
        dataset, _ = load_dataset(_input_path(config, "dataset"), model.schema)
        positives = dataset.areas[dataset.labels == 1]
        thresholds = [severity_threshold(positives, q) for q in severities]

    if periods is not None:
        wanted = set(periods)
        return_levels = [rl for rl in return_levels
                         if rl.return_period in wanted]
    surfaces = hypothesised_hazard(model, return_levels, static, ndvi,
                                   thresholds, scenario)
    for surface in surfaces:
        name = (f"surface_q{_format_cell(surface.q)}"
                f"_P{_format_cell(surface.return_period)}.csv")
        write_hazard_surfaces([surface], os.path.join(out_dir, name))
    write_hazard_surfaces(surfaces, os.path.join(out_dir, "surfaces.csv"))

    resolved = dict(config)
    resolved["severities"] = severities
    if periods is not None:
        resolved["periods"] = periods
    resolved["scenario"] = scenario
    _write_resolved(resolved, "hazard", seed, out_dir)


def cmd_scenario_diff(config: dict, out_dir: str, seed: int) -> None:
    """Cellwise change classification between two surface files with
    matching (q, P) grids."""
    from .data import _format_float
    from .hazard import (HazardError, hazard_class, read_hazard_surfaces,
                         scenario_change)

    band = float(config.get("no_change_band", 0.20))
    current = read_hazard_surfaces(_input_path(config, "current"))
    future = read_hazard_surfaces(_input_path(config, "future"))
    cur_cells = {(s.q, s.return_period): s for s in current}
    fut_cells = {(s.q, s.return_period): s for s in future}
    if len(cur_cells) != len(current) or len(fut_cells) != len(future):
        raise HazardError("duplicate (q, P) cells within one surface file")
    if set(cur_cells) != set(fut_cells):
        only_cur = sorted(set(cur_cells) - set(fut_cells))
        only_fut = sorted(set(fut_cells) - set(cur_cells))
        raise HazardError(
            "surface files cover different (q, P) grids",
            [f"only in current: q={q:g}, P={P:g}" for q, P in only_cur]
            + [f"only in future: q={q:g}, P={P:g}" for q, P in only_fut])

    changes = [scenario_change(cur_cells[key], fut_cells[key], band)
               for key in sorted(cur_cells)]
    with open(os.path.join(out_dir, "scenario_diff.csv"), "w",
              encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site_id", "q", "return_period", "scenario", "p",
                         "i_q", "h", "hazard_class", "rel_change",
                         "change_class"])
        for change in changes:
            for i, site in enumerate(change.site_ids):
                writer.writerow([
                    site, _format_float(change.q),
                    _format_float(change.return_period),
                    change.scenario_future, _format_float(change.p[i]),
                    _format_float(change.i_q[i]), _format_float(change.h[i]),
                    hazard_class(float(change.h[i])),
                    _format_float(change.rel_change[i]),
                    change.change_class[i],
                ])

    resolved = dict(config)
    resolved["no_change_band"] = band
    _write_resolved(resolved, "scenario-diff", seed, out_dir)


_COMMANDS = {
    "fit": cmd_fit,
    "hazard": cmd_hazard,
    "return-levels": cmd_return_levels,
    "scenario-diff": cmd_scenario_diff,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "tune-gamma": cmd_tune_gamma,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slopehazard",
                     description="landslide hazard modelling runs")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name, handler in _COMMANDS.items():
        p = sub.add_parser(name, help=handler.__doc__.splitlines()[0],
                           description=handler.__doc__)
        p.add_argument("--config", required=True,
                       help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="top-level seed (overrides the config)")
        p.add_argument("--out-dir", default=None,
                       help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread count (HAZ_THREADS as fallback)")
    return parser


def _resolve_threads(flag_value) -> None:
    value = flag_value
    if value is None:
        env = os.environ.get("HAZ_THREADS")
        if env is None:
            return
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"HAZ_THREADS is not an integer: {env!r}") from None
    if value < 1:
        raise UsageError(f"thread count must be at least 1, got {value}")
    for var in _THREAD_VARS:
        os.environ[var] = str(value)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            raise UsageError("a subcommand is required "
                             f"(one of: {', '.join(_COMMANDS)})")
        _resolve_threads(args.threads)

        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"missing config file: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError("config JSON must be an object")

        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        out_dir = args.out_dir or config.get("out_dir", ".")
        os.makedirs(out_dir, exist_ok=True)
        _COMMANDS[args.subcommand](config, out_dir, seed)
        return 0
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else str(exc)
        return _fail("usage", f"missing input file: {name}", 2)
    except Exception as exc:  # noqa: BLE001  (CLI boundary: everything maps to exit 1)
        return _fail("computation", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
