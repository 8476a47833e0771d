"""Shared fixtures. Expensive closed-loop runs are session-scoped so the
unit suite and the acceptance gate reuse them."""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import pytest

from quadsafe import harness, model, sim
from quadsafe import barrier as bar

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "src" / "quadsafe" / "scenarios"


@pytest.fixture(scope="session")
def prm():
    return sim.QuadParams()


@pytest.fixture(scope="session")
def aug_pair(prm):
    return model.augmented_matrices(prm.D)


@pytest.fixture(scope="session")
def scenario1():
    return harness.load_scenario(SCENARIO_DIR / "circle_two_cylinders.toml")


@pytest.fixture(scope="session")
def scenario_gap():
    return harness.load_scenario(SCENARIO_DIR / "circle_narrow_gap.toml")


@pytest.fixture(scope="session")
def scenario_hover():
    return harness.load_scenario(SCENARIO_DIR / "hover.toml")


@pytest.fixture(scope="session")
def chains1(scenario1):
    return scenario1.build_chains()


def _run(cfg, kind=None, lam=None, duration=None, p=None):
    cfg = copy.deepcopy(cfg)
    if kind is not None:
        cfg.kind = kind
    if lam is not None:
        cfg.lam = lam
    if duration is not None:
        cfg.duration = duration
    if p is not None:
        cfg.barrier_gain = p
    log = harness.run_simulation(cfg)
    return log, harness.compute_metrics(log, cfg), cfg


@pytest.fixture(scope="session")
def run_sdhocbf(scenario1):
    return _run(scenario1)


@pytest.fixture(scope="session")
def run_filter(scenario1):
    return _run(scenario1, kind="hocbf_filter")


@pytest.fixture(scope="session")
def run_mpc_dc_short(scenario1):
    return _run(scenario1, kind="mpc_dc", duration=5.0)


@pytest.fixture(scope="session")
def run_dcbf1_short(scenario1):
    return _run(scenario1, kind="dcbf", lam=1.0, duration=5.0)


@pytest.fixture(scope="session")
def run_dcbf02(scenario1):
    # 6 s covers the first obstacle pass where the deviation ordering shows;
    # the one-step-decay SCP baseline is by far the slowest controller
    return _run(scenario1, kind="dcbf", lam=0.2, duration=6.0)


@pytest.fixture(scope="session")
def run_hover(scenario_hover):
    return _run(scenario_hover)


@pytest.fixture(scope="session")
def input_box():
    return bar.IntervalBox(np.full(3, -40.0), np.full(3, 40.0))
