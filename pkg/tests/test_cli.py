"""End-to-end command-line runs driven through a subprocess.

Each test invokes the package entry point exactly as a user would and
inspects only what it leaves behind: the exit status, the one-line JSON
error on stderr, and the CSV/JSON artifacts in the output directory.
A module-scoped fixture builds one simulated dataset and one fitted
model that the read-only tests share.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from slopehazard.egpd import EgpdParams, egpd_sample


def _run(*args):
    cmd = [sys.executable, "-m", "slopehazard.cli", *[str(a) for a in args]]
    return subprocess.run(cmd, capture_output=True, text=True)


def _run_ok(*args):
    result = _run(*args)
    assert result.returncode == 0, result.stderr
    return result


def _stderr_error(result):
    payload = json.loads(result.stderr.strip().splitlines()[-1])
    return payload["error"]


def _write_config(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def _read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_trigger_series(path):
    """Two informative sites plus one constant site the fit must skip."""
    rng = np.random.default_rng(42)
    rows = []
    for site, scale_mean, scale_max, seed in (("s1", 0.8, 1.6, 601),
                                              ("s2", 1.2, 2.4, 602)):
        means = egpd_sample(30, EgpdParams(3.0, scale_mean, 0.15), seed)
        maxes = egpd_sample(30, EgpdParams(3.0, scale_max, 0.15), seed + 50)
        sds = 0.3 + 0.4 * rng.random(30)
        for i in range(30):
            rows.append([site, 1980 + i, means[i], maxes[i], sds[i]])
    for i in range(30):
        rows.append(["s3", 1980 + i, 1.0, 2.0, 0.5])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site_id", "year", "precip_mean", "precip_max",
                         "precip_sd"])
        writer.writerows(rows)
    return path


def _write_covariates(path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site_id", "ndvi_mean", "ndvi_sd", "static_0",
                         "static_1", "static_2"])
        writer.writerow(["s1", 0.5, 0.1, 0.2, 0.2, 0.2])
        writer.writerow(["s2", 0.4, 0.12, -0.1, -0.1, -0.1])
    return path


def _write_surface(path, cells, i_q_values):
    """One-site surface file with p = 0.5 so h is half of i_q."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site_id", "q", "return_period", "scenario", "p",
                         "i_q", "h", "hazard_class"])
        for (q, period), i_q in zip(cells, i_q_values):
            writer.writerow(["u1", q, period, "historical", 0.5, i_q,
                             0.5 * i_q, "Low"])
    return path


_TRAIN = {"n_blocks": 1, "width": 8, "batch_size": 64,
          "val_crps_max_records": 0}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")

    sim_cfg = _write_config(ws / "sim.json",
                            {"n_sites": 30, "n_years": 20,
                             "quickstart_seed": 0})
    _run_ok("simulate", "--config", sim_cfg, "--seed", 11,
            "--out-dir", ws / "sim")

    fit_cfg = _write_config(ws / "fit.json", {
        "dataset": str(ws / "sim" / "dataset.csv"),
        "schema": str(ws / "sim" / "schema.json"),
        "train": _TRAIN,
        "epochs": 30,
    })
    _run_ok("fit", "--config", fit_cfg, "--seed", 7, "--out-dir", ws / "fit")

    trigger = _write_trigger_series(ws / "trigger.csv")
    rl_cfg = _write_config(ws / "rl.json", {"trigger_series": str(trigger)})
    _run_ok("return-levels", "--config", rl_cfg, "--out-dir", ws / "rl")

    covariates = _write_covariates(ws / "covariates.csv")
    hz_cfg = _write_config(ws / "hz.json", {
        "model": str(ws / "fit" / "model.json"),
        "return_levels": str(ws / "rl" / "return_levels.csv"),
        "site_covariates": str(covariates),
        "dataset": str(ws / "sim" / "dataset.csv"),
        "scenario": "historical",
    })
    _run_ok("hazard", "--config", hz_cfg, "--out-dir", ws / "hz")

    return {"ws": ws, "sim_cfg": sim_cfg, "fit_cfg": fit_cfg,
            "sim": ws / "sim", "fit": ws / "fit", "rl": ws / "rl",
            "hz": ws / "hz", "trigger": trigger, "covariates": covariates}


class TestSimulate:
    def test_writes_dataset_schema_and_truth(self, workspace):
        sim = workspace["sim"]
        for name in ("dataset.csv", "schema.json", "truth.json",
                     "resolved_config.json"):
            assert (sim / name).exists()
        rows = _read_rows(sim / "dataset.csv")
        assert len(rows) == 30 * 20
        labels = {row["landslide"] for row in rows}
        assert labels <= {"0", "1"} and len(labels) == 2

    def test_resolved_config_names_run(self, workspace):
        resolved = _read_json(workspace["sim"] / "resolved_config.json")
        assert resolved["subcommand"] == "simulate"
        assert resolved["seed"] == 11
        assert resolved["config"]["n_sites"] == 30

    def test_threads_flag_accepted(self, workspace, tmp_path):
        _run_ok("simulate", "--config", workspace["sim_cfg"], "--seed", 11,
                "--out-dir", tmp_path / "sim", "--threads", 1)
        assert (tmp_path / "sim" / "dataset.csv").exists()


class TestFit:
    def test_artifacts_and_report(self, workspace):
        fit = workspace["fit"]
        for name in ("model.json", "trace.csv", "report.json",
                     "resolved_config.json"):
            assert (fit / name).exists()
        report = _read_json(fit / "report.json")
        assert 0.0 <= report["auc"] <= 1.0
        assert report["kappa"] > 0.0 and report["xi"] > 0.0
        assert 1 <= report["best_epoch"] <= 30

    def test_trace_has_one_row_per_epoch(self, workspace):
        rows = _read_rows(workspace["fit"] / "trace.csv")
        assert [int(r["epoch"]) for r in rows] == list(range(1, 31))
        assert all(float(r["train_loss"]) > 0.0 for r in rows)

    def test_rerun_writes_identical_artifacts(self, workspace, tmp_path):
        _run_ok("fit", "--config", workspace["fit_cfg"], "--seed", 7,
                "--out-dir", tmp_path / "fit2")
        for name in ("model.json", "trace.csv", "report.json"):
            first = (workspace["fit"] / name).read_bytes()
            second = (tmp_path / "fit2" / name).read_bytes()
            assert first == second, f"{name} differs between reruns"


class TestEvaluate:
    def test_report_and_point_tables(self, workspace, tmp_path):
        cfg = _write_config(tmp_path / "eval.json", {
            "model": str(workspace["fit"] / "model.json"),
            "dataset": str(workspace["sim"] / "dataset.csv"),
        })
        _run_ok("evaluate", "--config", cfg, "--out-dir", tmp_path / "eval")
        report = _read_json(tmp_path / "eval" / "report.json")
        assert report["counts"]["records"] == 600
        assert report["counts"]["positives"] > 0
        assert 0.0 <= report["auc"] <= 1.0
        assert report["crps_mean"] == pytest.approx(
            report["crps_total"] / report["counts"]["positives"])
        roc = _read_rows(tmp_path / "eval" / "roc.csv")
        assert {"fpr", "tpr"} <= set(roc[0])
        if report["qq"] is not None:
            assert (tmp_path / "eval" / "qq.csv").exists()


class TestReturnLevels:
    def test_constant_site_excluded_with_reason(self, workspace):
        report = _read_json(workspace["rl"] / "report.json")
        excluded = report["excluded_sites"]
        assert any(e["site"] == "s3"
                   and "constant annual_max series" in e["reason"]
                   and "constant annual_mean series" in e["reason"]
                   for e in excluded)

    def test_table_covers_sites_by_periods(self, workspace):
        rows = _read_rows(workspace["rl"] / "return_levels.csv")
        assert len(rows) == 8
        cells = {(r["site_id"], float(r["return_period"])) for r in rows}
        assert cells == {(s, p) for s in ("s1", "s2")
                         for p in (5.0, 10.0, 15.0, 20.0)}

    def test_levels_increase_with_period(self, workspace):
        rows = _read_rows(workspace["rl"] / "return_levels.csv")
        for site in ("s1", "s2"):
            ordered = sorted((float(r["return_period"]), float(r["rl_max"]),
                              float(r["rl_mean"]))
                             for r in rows if r["site_id"] == site)
            maxes = [rl for _, rl, _ in ordered]
            means = [rl for _, _, rl in ordered]
            assert maxes == sorted(maxes) and len(set(maxes)) == 4
            assert means == sorted(means) and len(set(means)) == 4


class TestHazard:
    def test_one_file_per_cell_plus_combined(self, workspace):
        names = {p.name for p in workspace["hz"].glob("surface_*.csv")}
        expected = {f"surface_q{q}_P{p}.csv"
                    for q in ("0.05", "0.5", "0.95")
                    for p in ("5", "10", "15", "20")}
        assert names == expected
        combined = _read_rows(workspace["hz"] / "surfaces.csv")
        assert len(combined) == 12 * 2

    def test_hazard_is_probability_times_intensity(self, workspace):
        for row in _read_rows(workspace["hz"] / "surfaces.csv"):
            p, i_q, h = (float(row[k]) for k in ("p", "i_q", "h"))
            assert 0.0 <= h <= 1.0
            assert h == pytest.approx(p * i_q, rel=1e-12, abs=1e-300)

    def test_hazard_nonincreasing_in_severity(self, workspace):
        rows = _read_rows(workspace["hz"] / "surfaces.csv")
        by_cell = {}
        for row in rows:
            key = (row["site_id"], float(row["return_period"]))
            by_cell.setdefault(key, []).append((float(row["q"]),
                                                float(row["h"])))
        for values in by_cell.values():
            ordered = [h for _, h in sorted(values)]
            assert all(a >= b for a, b in zip(ordered, ordered[1:]))


class TestScenarioDiff:
    _CELLS = ((0.05, 5.0), (0.5, 5.0), (0.95, 5.0))

    def test_band_classification(self, tmp_path):
        current = _write_surface(tmp_path / "cur.csv", self._CELLS,
                                 [0.2, 0.2, 0.2])
        future = _write_surface(tmp_path / "fut.csv", self._CELLS,
                                [0.22, 0.5, 0.14])
        cfg = _write_config(tmp_path / "sd.json", {
            "current": str(current), "future": str(future),
        })
        _run_ok("scenario-diff", "--config", cfg, "--out-dir", tmp_path / "sd")
        rows = _read_rows(tmp_path / "sd" / "scenario_diff.csv")
        classes = {(float(r["q"]), float(r["return_period"])):
                   r["change_class"] for r in rows}
        assert classes == {(0.05, 5.0): "no_change",
                           (0.5, 5.0): "increase",
                           (0.95, 5.0): "decrease"}

    def test_identical_surfaces_report_no_increase(self, tmp_path):
        surface = _write_surface(tmp_path / "same.csv", self._CELLS,
                                 [0.2, 0.2, 0.2])
        cfg = _write_config(tmp_path / "sd.json", {
            "current": str(surface), "future": str(surface),
        })
        _run_ok("scenario-diff", "--config", cfg, "--out-dir", tmp_path / "sd")
        rows = _read_rows(tmp_path / "sd" / "scenario_diff.csv")
        assert {r["change_class"] for r in rows} <= {"no_change",
                                                     "indeterminate"}

    def test_mismatched_grids_fail(self, tmp_path):
        current = _write_surface(tmp_path / "cur.csv", self._CELLS,
                                 [0.2, 0.2, 0.2])
        future = _write_surface(tmp_path / "fut.csv", self._CELLS[:2],
                                [0.2, 0.2])
        cfg = _write_config(tmp_path / "sd.json", {
            "current": str(current), "future": str(future),
        })
        result = _run("scenario-diff", "--config", cfg,
                      "--out-dir", tmp_path / "sd")
        assert result.returncode == 1
        error = _stderr_error(result)
        assert error["kind"] == "computation"
        assert "different (q, P) grids" in error["message"]


class TestTuneGamma:
    def test_sweep_writes_grid_and_selection(self, workspace, tmp_path):
        cfg = _write_config(tmp_path / "tg.json", {
            "dataset": str(workspace["sim"] / "dataset.csv"),
            "schema": str(workspace["sim"] / "schema.json"),
            "grid": [0.4, 0.6],
            "epochs": 5,
            "train": dict(_TRAIN, val_crps_max_records=50),
        })
        _run_ok("tune-gamma", "--config", cfg, "--out-dir", tmp_path / "tg")
        rows = _read_rows(tmp_path / "tg" / "tune.csv")
        assert [float(r["gamma"]) for r in rows] == [0.4, 0.6]
        report = _read_json(tmp_path / "tg" / "report.json")
        assert report["best_gamma"] in (0.4, 0.6)
        assert len(report["rows"]) == 2


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path):
        result = _run("fit", "--config", tmp_path / "nope.json")
        assert result.returncode == 2
        error = _stderr_error(result)
        assert error["kind"] == "usage"
        assert "nope.json" in error["message"]

    def test_invalid_config_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        result = _run("fit", "--config", bad)
        assert result.returncode == 2
        assert "not valid JSON" in _stderr_error(result)["message"]

    def test_missing_input_file_names_path(self, workspace, tmp_path):
        cfg = _write_config(tmp_path / "fit.json", {
            "dataset": str(workspace["sim"] / "dataset.csv"),
            "schema": str(tmp_path / "missing_schema.json"),
        })
        result = _run("fit", "--config", cfg, "--out-dir", tmp_path / "out")
        assert result.returncode == 2
        assert "missing_schema.json" in _stderr_error(result)["message"]

    def test_empty_severity_list(self, workspace, tmp_path):
        cfg = _write_config(tmp_path / "hz.json", {
            "model": str(workspace["fit"] / "model.json"),
            "return_levels": str(workspace["rl"] / "return_levels.csv"),
            "site_covariates": str(workspace["covariates"]),
            "dataset": str(workspace["sim"] / "dataset.csv"),
            "severities": [],
        })
        result = _run("hazard", "--config", cfg, "--out-dir", tmp_path / "out")
        assert result.returncode == 2
        assert "severities" in _stderr_error(result)["message"]

    def test_tune_gamma_requires_crps_budget(self, workspace, tmp_path):
        cfg = _write_config(tmp_path / "tg.json", {
            "dataset": str(workspace["sim"] / "dataset.csv"),
            "schema": str(workspace["sim"] / "schema.json"),
            "train": {"val_crps_max_records": 0},
        })
        result = _run("tune-gamma", "--config", cfg,
                      "--out-dir", tmp_path / "out")
        assert result.returncode == 2
        assert "val_crps_max_records" in _stderr_error(result)["message"]

    def test_subcommand_required(self):
        result = _run()
        assert result.returncode == 2
        assert "subcommand" in _stderr_error(result)["message"]
