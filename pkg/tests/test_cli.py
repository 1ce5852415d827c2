import json
import subprocess
import sys

import numpy as np
import pytest

from frailcredit.cli import LOGLIK_FOOTER, OBS_FOOTER, REPORT_HEADER, ROW_LABELS, main
from frailcredit.data_io import load_panel

SMALL = {
    "seed": 42,
    "prior": {"type": "uniform"},
    "generator": {"n_firms": 300, "n_months": 72},
    "smc": {"n_particles": 32},
    "em": {"n_paths_per_iter": 5, "max_iters": 2, "last_month": 47},
    "forecast": {"horizon_months": 12, "n_draws": 20, "origin_month": 48},
    "backtest": {"horizons_years": [1, 2], "models": ["uniform", "logistic"]},
    "report": {"figures": True},
    "paths": {"panel": "sim/panel.csv", "fit": "est/fit.json", "pd_table": "fc/pd_table.csv"},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    c = str(cfg)
    for cmd, out in [("simulate", "sim"), ("estimate", "est"), ("forecast", "fc"),
                     ("cap-plot", "cap"), ("backtest", "bt")]:
        assert main([cmd, "--config", c, "--out", str(root / out)]) == 0, cmd
    return root


def test_simulate_outputs(workspace):
    panel = load_panel(workspace / "sim" / "panel.csv")
    assert panel.n_firms == 300 and panel.month_range == (0, 71)
    truth = json.loads((workspace / "sim" / "truth.json").read_text())
    assert "theta" in json.dumps(truth)


def test_fit_report_layout_and_identities(workspace):
    lines = (workspace / "est" / "fit_report.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    rows = [l.split(",") for l in lines[1:12]]
    assert [r[0] for r in rows] == list(ROW_LABELS)
    for r in rows:
        coef, se, t, lo, hi = map(float, r[1:])
        assert abs(t * se - coef) <= 1e-9 * max(1.0, abs(coef))
        assert lo == coef - 1.96 * se and hi == coef + 1.96 * se
    assert lines[12].startswith(OBS_FOOTER + ",")
    panel = load_panel(workspace / "sim" / "panel.csv").window(0, 47)
    assert int(lines[12].split(",")[1]) == panel.n_cells
    assert lines[13].startswith(LOGLIK_FOOTER + ",")
    fit = json.loads((workspace / "est" / "fit.json").read_text())
    assert fit["end_month"] == 47 and len(fit["terminal_samples"]) == 5


def test_forecast_table(workspace):
    lines = (workspace / "fc" / "pd_table.csv").read_text().splitlines()
    assert lines[0] == "firm_id,horizon,pd"
    by_firm = {}
    for l in lines[1:]:
        f, h, p = l.split(",")
        by_firm.setdefault(f, []).append(float(p))
    assert all(len(v) == 12 and np.all(np.diff(v) >= 0) for v in by_firm.values())


def test_cap_plot_outputs(workspace):
    lines = (workspace / "cap" / "cap_curve.csv").read_text().splitlines()
    assert lines[0] == "x,y" and lines[1] == "0.0,0.0" and lines[-1] == "1.0,1.0"
    assert (workspace / "cap" / "cap_curve.png").stat().st_size > 0


def test_backtest_outputs(workspace):
    rows = [l.split(",") for l in (workspace / "bt" / "backtest.csv").read_text().splitlines()]
    head = rows[0]
    assert head[:2] == ["model", "horizon_years"] and head[-2:] == ["average", "undefined_cells"]
    years = head[2:-2]
    two_year = [r for r in rows[1:] if r[1] == "2"]
    assert all(r[2] == "" for r in two_year)          # first year has no 2-year cohort
    assert all(r[2 + len(years) - 1] != "" for r in rows[1:])
    curves = (workspace / "bt" / "cap_curves.csv").read_text().splitlines()
    assert curves[0] == "model,horizon_years,year,x,y"
    for name in ("ar_by_horizon.png", "cap_uniform_1y.png", "cap_logistic_2y.png"):
        assert (workspace / "bt" / name).exists()


def test_reruns_are_byte_identical(workspace, tmp_path):
    c = str(workspace / "config.json")
    assert main(["simulate", "--config", c, "--out", str(tmp_path / "sim")]) == 0
    assert (tmp_path / "sim" / "panel.csv").read_bytes() == (workspace / "sim" / "panel.csv").read_bytes()
    assert main(["estimate", "--config", c, "--out", str(tmp_path / "est")]) == 0
    assert (tmp_path / "est" / "fit_report.csv").read_bytes() == \
        (workspace / "est" / "fit_report.csv").read_bytes()
    assert main(["backtest", "--config", c, "--out", str(tmp_path / "bt"), "--threads", "3"]) == 0
    for name in ("backtest.csv", "cap_curves.csv", "ar_by_horizon.png"):
        assert (tmp_path / "bt" / name).read_bytes() == (workspace / "bt" / name).read_bytes()


def test_seed_override_changes_panel(workspace, tmp_path):
    c = str(workspace / "config.json")
    assert main(["simulate", "--config", c, "--out", str(tmp_path), "--seed", "7"]) == 0
    assert (tmp_path / "panel.csv").read_bytes() != (workspace / "sim" / "panel.csv").read_bytes()


def test_bad_config_exit_status(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"smc": {"n_particles": 1}}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: config: smc.n_particles")


def test_missing_panel_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"prior": {"type": "uniform"}}))
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "paths.panel" in capsys.readouterr().err


def test_cap_plot_needs_origin(workspace, tmp_path, capsys):
    doc = dict(SMALL, forecast={"horizon_months": 12})
    cfg = workspace / "no_origin.json"
    cfg.write_text(json.dumps(doc))
    assert main(["cap-plot", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "forecast.origin_month" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "frailcredit", "simulate", "--out", str(tmp_path),
                        "--config", str(tmp_path / "absent.json")], capture_output=True, text=True)
    assert r.returncode == 2 and r.stderr.startswith("error: config:")
