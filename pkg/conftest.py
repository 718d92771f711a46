#!/usr/bin/env python3
"""
Shared pytest fixtures: the bundled heat-source scenario and one full run of it.
"""

from pathlib import Path

import pytest

from dptco.config import build_scenario, load_config
from dptco.sim import run

ROOT = Path(__file__).parent
SCENARIOS = ROOT / "scenarios"
HEAT_SOURCE = SCENARIOS / "heat_source_formation.yaml"


@pytest.fixture
def scenario_path() -> Path:
    return HEAT_SOURCE


@pytest.fixture
def config():
    cfg = load_config(HEAT_SOURCE)
    cfg.logging.file_path = None
    cfg.sim.progress = False
    return cfg


@pytest.fixture
def scenario(config):
    return build_scenario(config)


@pytest.fixture(scope="session")
def heat_source_run():
    """(scenario, trace) of the bundled scenario on [0, 5] s with h = 1e-4."""
    cfg = load_config(HEAT_SOURCE)
    cfg.logging.file_path = None
    cfg.sim.progress = False
    scen = build_scenario(cfg)
    return scen, run(scen)
