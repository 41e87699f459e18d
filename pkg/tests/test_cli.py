from __future__ import annotations

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from penaltydid.cli import EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION, EXIT_OK, main
from penaltydid.simgen import DgpConfig, true_event_effects

FAST_EST = ["--event-window", "-3:3", "--draws", "199"]
FAST_DML = ["--reform-month", "60", "--learner", "forest", "--trees", "20", "--folds", "3"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "11", "--n-units", "3000", "--out", str(out)]) == EXIT_OK
    return out


def inputs(simdir):
    return ["--claims", str(simdir / "claims.csv"), "--units", str(simdir / "units.csv")]


# ----------------------------------------------------------------------------- simulate

def test_simulate_outputs(simdir, tmp_path):
    units = read_csv(simdir / "units.csv")
    assert len(units) == 3000 + 1
    truth = json.loads((simdir / "truth.json").read_text())
    dgp = DgpConfig.from_json(truth["config"])
    assert dgp.seed == 11 and dgp.n_units == 3000
    ts, path = true_event_effects(dgp)
    assert truth["event_times"] == ts.tolist()
    assert truth["theta_es"] == path.tolist()
    assert len(ts) == 2 * dgp.n_months - 1
    # rerun: byte-identical files
    assert main(["simulate", "--seed", "11", "--n-units", "3000", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("claims.csv", "units.csv", "truth.json"):
        assert digest(tmp_path / name) == digest(simdir / name)


def test_seed_resolution(tmp_path, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 1, "n-units": 20, "preset": "null"}))
    monkeypatch.setenv("PENALTYDID_SEED", "5")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    got = json.loads((tmp_path / "a" / "truth.json").read_text())["config"]
    assert got["seed"] == 5 and got["n_units"] == 20
    assert main(["simulate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert json.loads((tmp_path / "b" / "truth.json").read_text())["config"]["seed"] == 7


def test_config_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("PENALTYDID_SEED", raising=False)
    assert main(["simulate", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "seed is required" in capsys.readouterr().err
    bad = tmp_path / "dgp.json"
    bad.write_text(json.dumps({"baseline": 0.99, "effect": [[0, 0.5]]}))
    assert main(["simulate", "--seed", "1", "--dgp", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--seed", "1", "--dgp", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) \
        == EXIT_CONFIG
    assert main(["estimate", "--seed", "1", "--claims", "x.csv", "--units", "y.csv", "--out", str(tmp_path)]) \
        == EXIT_CONFIG
    monkeypatch.setenv("PENALTYDID_SEED", "abc")
    assert main(["simulate", "--out", str(tmp_path)]) == EXIT_CONFIG


# ----------------------------------------------------------------------------- estimate

def test_estimate_schema_and_report(simdir, tmp_path):
    rc = main(["estimate", "--seed", "3", *inputs(simdir), *FAST_EST, "--out", str(tmp_path)])
    assert rc == EXIT_OK
    rows = read_csv(tmp_path / "event_study.csv")
    assert rows[0] == ["event_time", "estimate", "se", "uniform_lo", "uniform_hi", "n_cells"]
    assert [int(r[0]) for r in rows[1:]] == list(range(-3, 4))
    for r in rows[1:]:
        est, lo, hi = float(r[1]), float(r[3]), float(r[4])
        assert lo <= est <= hi and int(r[5]) > 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert {"version", "config", "timings", "sample", "n_cells", "skipped_cells", "critical_value"} <= set(rep)
    assert rep["version"].startswith("0.1.0")
    assert rep["config"]["delta"] == 9 and rep["config"]["seed"] == 3
    assert all(isinstance(v, float) for v in rep["timings"].values())
    assert rep["sample"]["n_units"] == 3000


def test_estimate_subgroup_filter(simdir, tmp_path):
    rc = main(["estimate", "--seed", "3", *inputs(simdir), *FAST_EST, "--filter", "employed=true",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    units = read_csv(simdir / "units.csv")
    col = units[0].index("employed")
    n_emp = sum(r[col] in ("1", "true", "True") for r in units[1:])
    info = json.loads((tmp_path / "report.json").read_text())["sample"]
    assert info["n_units_read"] == 3000
    assert info["n_units_subgroup"] == info["n_units"] == n_emp
    assert 0 < n_emp < 3000


def test_estimate_reproducible_rerun(simdir, tmp_path):
    args = ["estimate", "--seed", "4", *inputs(simdir), *FAST_EST, "--reproducible"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    for name in ("event_study.csv", "report.json"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(rep["timings"].values()) == {None}


def test_estimate_failures(simdir, tmp_path, capsys):
    assert main(["estimate", "--seed", "1", *inputs(simdir), "--event-window", "500:600", "--draws", "199",
                 "--out", str(tmp_path)]) == EXIT_ESTIMATION
    assert main(["estimate", "--seed", "1", *inputs(simdir), "--filter", "employed=maybe",
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["estimate", "--seed", "1", *inputs(simdir), "--draws", "10", "--out", str(tmp_path)]) \
        == EXIT_CONFIG
    broken = tmp_path / "claims.csv"
    broken.write_text("unit_id,month,kind,n_packages,pills\nu1,notamonth,rx,1,30\n")
    assert main(["estimate", "--seed", "1", "--claims", str(broken), "--units", str(simdir / "units.csv"),
                 "--out", str(tmp_path)]) == EXIT_DATA
    capsys.readouterr()


# ----------------------------------------------------------------------------- dml

def test_dml_blocks_and_determinism(simdir, tmp_path):
    args = ["dml", "--seed", "2", *inputs(simdir), *FAST_DML, "--placebo", "3,6", "--windows", "1",
            "--linear", "--reproducible"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    res = json.loads((tmp_path / "a" / "atet.json").read_text())
    assert sorted(res["placebo"]) == ["3", "6"]
    assert sorted(res["windows"]) == ["1"]
    assert set(res["main"]["cell_counts"]) == {"d0t0", "d0t1", "d1t0", "d1t1"}
    assert np.isfinite(res["main"]["theta"]) and res["main"]["se"] > 0
    assert "did" in res["linear_did"]
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    assert digest(tmp_path / "a" / "atet.json") == digest(tmp_path / "b" / "atet.json")


def test_dml_reform_outside_window(simdir, tmp_path, capsys):
    rc = main(["dml", "--seed", "2", *inputs(simdir), "--reform-month", "300", "--learner", "parametric",
               "--out", str(tmp_path)])
    assert rc == EXIT_DATA
    err = capsys.readouterr().err
    assert "d1t1" in err and "counts" in err
    assert main(["dml", "--seed", "2", *inputs(simdir), "--out", str(tmp_path)]) == EXIT_CONFIG


# ----------------------------------------------------------------------------- coverage

def test_coverage_outputs(tmp_path):
    args = ["coverage", "--seed", "5", "--preset", "null", "--n-units", "300", "--n-months", "30",
            "--delta", "0", "--event-window", "-2:2", "--draws", "199", "--reps", "3", "--reproducible",
            "--workers", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "coverage.csv")
    assert rows[0] == ["event_time", "bias", "bias_mcse", "rmse", "pointwise_coverage", "n"]
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["n_reps"] == 3 and 0 <= rep["uniform_coverage"] <= 1
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("coverage.csv", "report.json"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "penaltydid.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().startswith("penaltydid 0.1.0")
