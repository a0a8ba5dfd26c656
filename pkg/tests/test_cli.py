import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from synthbayes import cli
from synthbayes.errors import ExperimentError
from synthbayes.panel import Panel, write_panel


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_shape_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--seed", 4, "--out-dir", a, "--t-total", 50, "--t0", 40) == 0
    assert run("simulate", "--seed", 4, "--out-dir", b, "--t-total", 50, "--t0", 40) == 0
    rows = list(csv.reader(open(a / "panel.csv")))
    assert rows[0] == ["unit", "time", "outcome"] and len(rows) - 1 == 21 * 50
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    m = manifest(a)
    assert m["seed"] == 4 and m["command"] == "simulate"
    assert m["config_digest"] == cli.config_digest(m["config"])
    assert sorted(m["outputs"]) == ["panel.csv", "panel_meta.json"]
    assert len(list(a.glob("manifest*.json"))) == 1


def test_simulate_single_factor(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("simulate:\n  model: single_factor\n  lambda1: 1.5\n  lambdas: [1, 1]\n  t_total: 30\n  t0: 20\n")
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    assert len((tmp_path / "o" / "panel.csv").read_text().splitlines()) == 1 + 3 * 30


def test_invalid_rho_exit_2(tmp_path, capsys):
    assert run("simulate", "--rho", 1.2, "--out-dir", tmp_path) == 2
    assert "rho" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a list\n")
    assert run("simulate", "--config", bad, "--out-dir", tmp_path) == 2
    assert run("simulate", "--config", tmp_path / "missing.yaml", "--out-dir", tmp_path) == 2
    assert run("simulate", "--set", "nonsense", "--out-dir", tmp_path) == 2
    assert run("bvm", "--set", "bvm.freq_reps=5", "--out-dir", tmp_path) == 2
    assert "freq_reps" in capsys.readouterr().err


def _exact_match_panel(path, T=12, t0=8):
    g = np.random.default_rng(0)
    D = g.normal(size=(T, 3))
    Y = np.column_stack([D[:, 1], D])
    write_panel(Panel(("tr", "a", "b", "c"), tuple(range(1, T + 1)), Y, t0), path)


def test_fit_frequentist_exact_match(tmp_path):
    _exact_match_panel(tmp_path / "p.csv")
    out = tmp_path / "o"
    assert run("fit", tmp_path / "p.csv", "--t0-marker", 8, "--out-dir", out) == 0
    res = json.loads((out / "results.json").read_text())
    assert res["weights"] == [0.0, 1.0, 0.0]
    assert np.allclose(res["effects"]["taus"], 0.0)
    assert (out / "effects.csv").exists()


def test_fit_mle_insufficient_exit_3(tmp_path, capsys):
    _exact_match_panel(tmp_path / "p.csv", T=6, t0=3)
    assert run("fit", tmp_path / "p.csv", "--mode", "mle", "--t0-marker", 3, "--out-dir", tmp_path / "o") == 3
    assert "InsufficientDataError" in capsys.readouterr().err


def test_fit_mle_with_contrast(tmp_path):
    assert run("simulate", "--out-dir", tmp_path, "--t-total", 200, "--t0", 190) == 0
    assert run("fit", tmp_path / "panel.csv", "--mode", "mle", "--set", f"fit.contrast={[1] + [0] * 19}",
               "--out-dir", tmp_path / "o") == 0
    res = json.loads((tmp_path / "o" / "results.json").read_text())
    lo, hi = res["wald_95"]["interval"]
    assert lo < res["weights"][0] < hi


def test_fit_ingest_error_exit_2(tmp_path):
    (tmp_path / "p.csv").write_text("unit,time,outcome\na,1,1\na,2,2\nb,1,1\n")
    assert run("fit", tmp_path / "p.csv", "--t0-marker", 1, "--out-dir", tmp_path / "o") == 2


def test_fit_bayes_smoke(tmp_path):
    assert run("simulate", "--out-dir", tmp_path, "--seed", 1) == 0
    out = tmp_path / "o"
    code = run("fit", tmp_path / "panel.csv", "--mode", "bayes", "--profile", "smoke", "--draws", 50, "--out-dir", out)
    assert code == 0
    res = json.loads((out / "results.json").read_text())
    assert set(res["intervals"]) == {"0.75", "0.95"}
    assert isinstance(res["warning"], bool) and "diagnostics" in res
    m = manifest(out)
    assert m["config"]["sampler"]["draws"] == 50 and m["config"]["profile"] == "smoke"
    assert sorted(m["outputs"]) == ["draws.csv", "effects.csv", "results.json"]


def test_bvm_smoke_and_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, threads in ((a, 1), (b, 2)):
        assert run("bvm", "--profile", "smoke", "--draws", 200, "--threads", threads, "--seed", 2, "--out-dir", out) == 0
    for name in ("densities.csv", "metrics.csv", "manifest.json"):
        assert (a / name).exists()
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert len(rows) == 1 and rows[0]["t0"] == "30"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_config_layering(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("profile: smoke\nseed: 11\nsimulate:\n  t_total: 40\n  t0: 30\n")
    out = tmp_path / "o"
    assert run("simulate", "--config", cfg, "--set", "simulate.t_total=45", "--out-dir", out) == 0
    m = manifest(out)
    assert m["seed"] == 11 and m["config"]["simulate"]["t_total"] == 45 and m["config"]["profile"] == "smoke"
    assert run("simulate", "--config", cfg, "--seed", 12, "--out-dir", out) == 0
    assert manifest(out)["seed"] == 12


def test_experiment_failure_exit_4(tmp_path, monkeypatch):
    def boom(cfg):
        raise ExperimentError("too many failures")

    monkeypatch.setattr(cli.bvm, "run_bvm", boom)
    assert run("bvm", "--profile", "smoke", "--out-dir", tmp_path) == 4


def test_internal_error_exit_1(tmp_path, monkeypatch):
    def boom(cfg, out):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert run("simulate", "--out-dir", tmp_path) == 1


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "synthbayes.cli", "simulate", "--rho", "2", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "rho" in out.stderr
