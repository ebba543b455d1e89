import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from windshed.cli import POSTERIOR_HEADER, atomic_path, main, read_posterior_csv, InputError
from windshed.effects import EFFECTS_HEADER
from windshed.exposure import EXPOSURE_HEADER
from windshed.simulate import ScenarioSpec, write_scenario_inputs

FAST = ["--iter", "600", "--burn", "300", "--allow-unconverged"]


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    paths = write_scenario_inputs(ScenarioSpec(), d)
    cfg = Path(paths["config"])
    cfg.write_text(cfg.read_text() + "glm.n_iter = 400\nglm.n_burn = 100\nbart.n_iter = 80\nbart.n_burn = 20\n"
                   "bart.m = 10\n")
    return paths


@pytest.fixture(scope="module")
def fitted(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit-transport", "--config", inputs["config"], "--out", str(out), "--seed", "7", *FAST]) == 0
    return out


def test_posterior_outputs(fitted):
    draws, logp = read_posterior_csv(fitted / "posterior.csv")
    assert draws.shape == (600, 6) and np.isfinite(logp).all()
    assert (fitted / "posterior.csv").read_text().split("\n")[0] == ",".join(POSTERIOR_HEADER)
    lines = (fitted / "posterior.jsonl").read_text().splitlines()
    meta = json.loads(lines[0])
    assert meta["record"] == "metadata" and meta["n_chains"] == 2 and meta["seed"] == 7
    assert len(lines) == 601
    diag = json.loads((fitted / "diagnostics.json").read_text())
    assert set(diag["rhat"]) == set(POSTERIOR_HEADER[:-1])
    man = json.loads((fitted / "manifest-fit-transport.json").read_text())
    assert man["master_seed"] == 7 and len(man["inputs"]) >= 2
    assert set(man["outputs"]) == {"posterior.csv", "posterior.jsonl", "diagnostics.json"}


def test_same_seed_same_posterior(inputs, fitted, tmp_path):
    assert main(["fit-transport", "--config", inputs["config"], "--out", str(tmp_path), "--seed", "7", *FAST]) == 0
    assert (tmp_path / "posterior.csv").read_bytes() == (fitted / "posterior.csv").read_bytes()
    assert main(["fit-transport", "--config", inputs["config"], "--out", str(tmp_path), "--seed", "8", *FAST]) == 0
    assert (tmp_path / "posterior.csv").read_bytes() != (fitted / "posterior.csv").read_bytes()


def test_unconverged_exits_one(inputs, tmp_path, capsys):
    code = main(["fit-transport", "--config", inputs["config"], "--out", str(tmp_path), "--iter", "40", "--burn", "20"])
    assert code == 1
    assert "R-hat" in capsys.readouterr().err


def test_missing_input_exits_two_and_names_path(inputs, tmp_path, capsys):
    code = main(["fit-transport", "--config", inputs["config"], "--out", str(tmp_path),
                 "--set", "data.sulfate=/nope/missing.asc"])
    assert code == 2
    assert "/nope/missing.asc" in capsys.readouterr().err
    assert main(["fit-transport", "--config", str(tmp_path / "absent.txt")]) == 2


def test_bad_arguments_exit_two(inputs, tmp_path):
    assert main(["fit-transport", "--config", inputs["config"], "--chains", "1", "--out", str(tmp_path)]) == 2
    assert main(["fit-transport", "--config", inputs["config"], "--set", "nodot=1"]) == 2
    assert main(["fit-transport", "--config", inputs["config"], "--set", "mcmc.bogus=1", *FAST,
                 "--out", str(tmp_path)]) == 2
    assert main(["no-such-command"]) == 2


@pytest.fixture(scope="module")
def exposures(inputs, fitted):
    base = ["build-exposure", "--config", inputs["config"], "--posterior", str(fitted / "posterior.csv"),
            "--out", str(fitted)]
    assert main(base + ["--plugin"]) == 0
    assert main(base + ["--draws", "10"]) == 0
    return fitted


def _sets(path):
    rows = list(csv.reader(open(path)))
    return rows[0], {r[1] for r in rows[1:]}


def test_exposure_set_counts(exposures):
    header, ids = _sets(exposures / "exposures_plugin.csv")
    assert tuple(header) == EXPOSURE_HEADER and len(ids) == 1
    header, ids = _sets(exposures / "exposures_cut.csv")
    assert len(ids) == 10
    assert len(list((exposures / "sr_cut").glob("draw_*.csv"))) == 10
    assert len(list((exposures / "sr_plugin").glob("draw_*.csv"))) == 1


def test_too_many_draws_exit_two(inputs, exposures, tmp_path, capsys):
    code = main(["build-exposure", "--config", inputs["config"], "--posterior", str(exposures / "posterior.csv"),
                 "--out", str(tmp_path), "--draws", "100000"])
    assert code == 2 and "exceeds" in capsys.readouterr().err


def test_corrupt_posterior_reports_row(tmp_path):
    p = tmp_path / "posterior.csv"
    p.write_text(",".join(POSTERIOR_HEADER) + "\n1,2,3,4,5,6,7\n1,2,x,4,5,6,7\n")
    with pytest.raises(InputError, match=":3:"):
        read_posterior_csv(p)


def test_estimate_effects_both_arms(inputs, exposures, tmp_path):
    code = main(["estimate-effects", "--config", inputs["config"], "--out", str(tmp_path), "--models", "glm,bart",
                 "--plugin-exposures", str(exposures / "exposures_plugin.csv"),
                 "--cut-exposures", str(exposures / "exposures_cut.csv")])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "effects.csv")))
    assert tuple(rows[0]) == EFFECTS_HEADER
    assert {(r[9], r[10]) for r in rows[1:]} == {("plugin", "glm"), ("cut", "glm"), ("plugin", "bart"),
                                                 ("cut", "bart")}
    assert {"mu", "DE", "ADE", "IE", "AIE"} <= {r[0] for r in rows[1:]}
    cut_shares = [float(r[8]) for r in rows[1:] if r[9] == "cut"]
    assert all(0 <= s <= 1 for s in cut_shares)
    rep = (tmp_path / "variance_report.csv").read_text().splitlines()
    assert rep[0].startswith("method,model,estimand")


def test_fit_outcome_writes_jsonl(inputs, exposures, tmp_path):
    code = main(["fit-outcome", "--config", inputs["config"], "--out", str(tmp_path), "--models", "glm",
                 "--exposures", str(exposures / "exposures_cut.csv")])
    assert code == 0
    lines = (tmp_path / "outcome_glm.jsonl").read_text().splitlines()
    meta = json.loads(lines[0])
    assert meta["model"] == "glm" and meta["record"] == "metadata"
    assert main(["fit-outcome", "--config", inputs["config"], "--out", str(tmp_path), "--models", "glm,bart",
                 "--exposures", str(exposures / "exposures_cut.csv")]) == 2
    assert main(["fit-outcome", "--config", inputs["config"], "--out", str(tmp_path), "--draw", "999999",
                 "--exposures", str(exposures / "exposures_cut.csv")]) == 2


def test_no_temp_files_left_behind(exposures):
    leftovers = [p for p in exposures.rglob(".*") if p.is_file()]
    assert leftovers == []


def test_atomic_path_keeps_old_file_on_failure(tmp_path):
    p = tmp_path / "out.csv"
    p.write_text("old")
    with pytest.raises(RuntimeError):
        with atomic_path(p) as tmp:
            Path(tmp).write_text("partial")
            raise RuntimeError("crash")
    assert p.read_text() == "old"
    assert list(tmp_path.iterdir()) == [p]


def test_simulate_custom_suite(tmp_path):
    cfg = tmp_path / "sim.txt"
    cfg.write_text("scenario.name = 'tiny'\nstudy.transport = 'truth'\nstudy.n_imputations = 2\n"
                   "study.glm_iter = 300\nstudy.glm_burn = 100\n")
    code = main(["simulate", "--config", str(cfg), "--suite", "custom", "--replicates", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "simulation_custom.csv")))
    assert {r["scenario"] for r in rows} == {"tiny"}
    assert {"plugin", "cut"} == {r["method"] for r in rows}


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "windshed.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "windshed" in res.stdout


def test_thread_env_var_validated(inputs, tmp_path, monkeypatch):
    monkeypatch.setenv("WINDSHED_THREADS", "many")
    assert main(["fit-transport", "--config", inputs["config"], "--out", str(tmp_path), *FAST]) == 2
