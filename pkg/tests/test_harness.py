"""Scenario loading, closed-loop harness contracts, metrics, and the CLI."""

import copy
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from quadsafe import cli, harness

from conftest import SCENARIO_DIR


def short_hover(scenario_hover, duration=1.0):
    cfg = copy.deepcopy(scenario_hover)
    cfg.duration = duration
    return cfg


# ----------------------------------------------------------------- loading

def test_bundled_scenarios_load():
    for name in ("circle_two_cylinders", "circle_narrow_gap", "hover"):
        cfg = harness.load_scenario(SCENARIO_DIR / f"{name}.toml")
        assert cfg.mpc.N >= 1
        assert cfg.outer_T / cfg.inner_dt == pytest.approx(round(cfg.outer_T / cfg.inner_dt))


def test_scenario1_matches_published_setup(scenario1):
    assert scenario1.quad.m == pytest.approx(0.468)
    assert scenario1.mpc.N == 20 and scenario1.mpc.T == pytest.approx(0.1)
    assert scenario1.mpc.s_max == pytest.approx(40.0)
    assert [b.center for b in scenario1.barriers] == [[0.0, 2.0], [0.0, -2.0]]
    assert np.allclose(scenario1.x0.p, [2.0, -0.25, 1.0])
    assert np.allclose(scenario1.x0.v, [0.4, 0.82, 0.0])
    assert np.allclose(scenario1.x0.omega, [0.5, -0.4, 0.0])


def test_reject_bad_scenarios():
    base = {"barriers": [{"kind": "cylinder_z", "center": [0.0, 2.0], "radius": 1.0}]}
    with pytest.raises(harness.ScenarioError, match="unknown controller"):
        harness.scenario_from_dict({**base, "controller": {"kind": "nope"}})
    with pytest.raises(harness.ScenarioError, match="lam"):
        harness.scenario_from_dict({**base, "controller": {"kind": "dcbf"}})
    with pytest.raises(harness.ScenarioError, match="unit norm"):
        harness.scenario_from_dict({**base, "initial": {"q_xyzw": [0, 0, 0, 2.0]}})
    with pytest.raises(harness.ScenarioError, match="integer multiple"):
        harness.scenario_from_dict({**base, "sim": {"inner_dt_s": 3e-4}})
    # initial state inside an obstacle violates the invariance precondition
    with pytest.raises(harness.ScenarioError, match="violates barrier"):
        harness.scenario_from_dict({**base, "initial": {
            "p": [0.0, 2.0, 1.0], "v": [0.0] * 3, "omega": [0.0] * 3}})


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(harness.ScenarioError):
        harness.load_scenario(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("not = [valid\n")
    with pytest.raises(harness.ScenarioError, match="TOML parse error"):
        harness.load_scenario(bad)


def test_save_load_roundtrip(scenario1, tmp_path):
    path = tmp_path / "round.toml"
    harness.save_scenario(scenario1, path)
    again = harness.load_scenario(path)
    assert again.kind == scenario1.kind
    assert again.mpc.N == scenario1.mpc.N
    assert np.array_equal(again.mpc.Q, scenario1.mpc.Q)
    assert np.array_equal(again.x0.as_vector(), scenario1.x0.as_vector())
    assert [b.center for b in again.barriers] == [b.center for b in scenario1.barriers]
    assert again.reference.radius == scenario1.reference.radius


# ------------------------------------------------------------------ running

def test_rate_contract(scenario_hover):
    """n_inner = outer_T / inner_dt rows per outer step, timestamps on grid."""
    cfg = short_hover(scenario_hover)
    log = harness.run_simulation(cfg)
    n_outer = int(round(cfg.duration / cfg.outer_T))
    n_inner = int(round(cfg.outer_T / cfg.inner_dt))
    assert len(log.outer_t) == n_outer
    assert log.inner.shape[0] == n_outer * n_inner
    assert np.allclose(np.diff(log.inner[:, 0]), cfg.inner_dt, atol=1e-12)
    assert np.allclose(log.outer_t, cfg.outer_T * np.arange(n_outer), atol=1e-12)


def test_determinism_byte_identical(scenario_hover, tmp_path):
    cfg = short_hover(scenario_hover)
    for d in ("a", "b"):
        log = harness.run_simulation(cfg)
        harness.write_logs(log, cfg, tmp_path / d)
    assert (tmp_path / "a" / "log.csv").read_bytes() == \
        (tmp_path / "b" / "log.csv").read_bytes()
    # outer.csv is identical except for the wall-clock solve_ms column
    for la, lb in zip((tmp_path / "a" / "outer.csv").read_text().splitlines(),
                      (tmp_path / "b" / "outer.csv").read_text().splitlines()):
        assert la.rsplit(",", 1)[0] == lb.rsplit(",", 1)[0]


def test_metrics_on_synthetic_log(scenario1):
    """Metrics recomputed from a hand-built log with known geometry."""
    t = np.arange(0.0, 3.0, 1e-3)
    inner = np.zeros((len(t), 18))
    inner[:, 0] = t
    # park at (2, 0, 1): h = 4 + 4 - 1 = 7 for both cylinders at (0, +-2)
    inner[:, 1] = 2.0
    inner[:, 3] = 1.0
    inner[:, 7] = 1.0  # unit quaternion
    n_outer = 30
    log = harness.SimLog(inner, 0.1 * np.arange(n_outer),
                         np.full((n_outer, 2), 7.0), np.zeros((n_outer, 2)),
                         np.zeros((n_outer, 3)), ["optimal"] * n_outer,
                         np.full(n_outer, 0.01))
    m = harness.compute_metrics(log, scenario1)
    assert m.min_h == pytest.approx([7.0, 7.0])
    assert m.infeasible_count == 0
    assert m.mean_solve_time == pytest.approx(0.01)
    assert not m.gap_passed  # never between the cylinders
    # rms error over t >= 2 against the circle reference, checked directly
    ref = np.array([scenario1.reference.flat(ti).p for ti in t[t >= 2.0]])
    expect = np.sqrt(np.mean(np.sum((inner[t >= 2.0, 1:4] - ref) ** 2, axis=1)))
    assert m.rms_pos_err == pytest.approx(expect)


def test_gap_detection_on_synthetic_path(scenario_gap):
    """A straight pass through the gap midpoint sets gap_passed."""
    t = np.arange(0.0, 1.0, 1e-3)
    inner = np.zeros((len(t), 18))
    inner[:, 0] = t
    inner[:, 1] = -2.0                      # midway between (-3,0) and (-1,0)
    inner[:, 2] = np.linspace(-1.0, 1.0, len(t))
    inner[:, 3] = scenario_gap.reference.altitude
    inner[:, 7] = 1.0
    log = harness.SimLog(inner, np.array([0.0]), np.full((1, 2), 1.0),
                         np.zeros((1, 2)), np.zeros((1, 3)), ["optimal"],
                         np.array([0.01]))
    m = harness.compute_metrics(log, scenario_gap)
    assert m.gap_passed


def test_infeasible_run_is_flagged(run_sdhocbf):
    """The bundled obstacle scenario aborts with the documented diagnostic
    while every logged barrier value stays positive (see the decisions
    ledger on recursive feasibility of the compensated constraint)."""
    log, metrics, _ = run_sdhocbf
    assert log.failed
    assert "two consecutive infeasible" in log.failure_reason
    assert metrics.failed
    assert min(metrics.min_h) > 0.0


# --------------------------------------------------------------------- CLI

def test_cli_exit_codes(tmp_path, scenario_hover):
    assert cli.main(["run", "--scenario", "missing.toml",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    hover = tmp_path / "hover_short.toml"
    harness.save_scenario(short_hover(scenario_hover), hover)
    rc = cli.main(["run", "--scenario", str(hover), "--out", str(tmp_path / "ok")])
    assert rc == cli.EXIT_OK
    out = json.loads((tmp_path / "ok" / "metrics.json").read_text())
    assert out["failed"] is False

    rc = cli.main(["run", "--scenario", str(hover), "--controller", "dcbf",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_CONFIG  # dcbf without --lam


def test_cli_sim_failure_exit(tmp_path, scenario1):
    """The aborting obstacle scenario maps to the simulation-failure code."""
    cfg = copy.deepcopy(scenario1)
    cfg.duration = 4.0
    sc = tmp_path / "s1.toml"
    harness.save_scenario(cfg, sc)
    rc = cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_SIM


def test_cli_compare_and_sweep(tmp_path, scenario_hover):
    hover = tmp_path / "hover_short.toml"
    harness.save_scenario(short_hover(scenario_hover), hover)
    rc = cli.main(["compare", "--scenario", str(hover),
                   "--controllers", "sdhocbf", "hocbf_filter",
                   "--out", str(tmp_path / "cmp")])
    assert rc == cli.EXIT_OK
    cmp_data = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert set(cmp_data) == {"sdhocbf", "hocbf_filter"}

    rc = cli.main(["sweep", "--scenario", str(hover), "--param", "p",
                   "--values", "5,6", "--out", str(tmp_path / "sw")])
    assert rc == cli.EXIT_OK
    sw = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    assert set(sw) == {"p=5", "p=6"}


def test_cli_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "quadsafe.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "run" in proc.stdout and "sweep" in proc.stdout


def test_csv_headers(tmp_path, scenario_hover):
    cfg = short_hover(scenario_hover, duration=0.2)
    log = harness.run_simulation(cfg)
    harness.write_logs(log, cfg, tmp_path)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == harness.INNER_CSV_HEADER
    assert (tmp_path / "outer.csv").read_text().splitlines()[0] == harness.OUTER_CSV_HEADER
