import time
from dataclasses import replace

import pytest

from iptm.models import (BatteryParams, CabinParams, CoolingParams, VehicleParams)
from iptm.scenario import DriveCycle, load_nominal, run_case, save_scenario

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_vehicle():
    """Round-number parameters used by the hand-computed examples."""
    return VehicleParams(
        battery=BatteryParams(360.0, 0.1, 180000.0, 100.0, 1000.0, 5.0),
        cabin=CabinParams(40.0, 1000.0, 50.0, 300.0, 100.0, 100.0, 1),
        cooling=CoolingParams(cop=2.0, q_total_max=12e3),
    )


@pytest.fixture(scope="session")
def nominal():
    return load_nominal()


class _CaseCache:
    """Runs each nominal case at most once per session."""

    def __init__(self, sc):
        self.sc = sc
        self.results = {}
        self.seconds = {}

    def __getitem__(self, case_id):
        if case_id not in self.results:
            t0 = time.perf_counter()
            self.results[case_id] = run_case(self.sc, case_id)
            self.seconds[case_id] = time.perf_counter() - t0
        return self.results[case_id]


@pytest.fixture(scope="session")
def case_runs(nominal):
    return _CaseCache(nominal)


def quick_scenario(nominal, **changes):
    """A short drive and a small SOC lift, so closed-loop runs take seconds."""
    cycle = nominal.drive_cycle
    k = cycle.time.index(150.0)
    short = DriveCycle(cycle.time[: k + 1], cycle.speed[: k + 1])
    base = dict(drive_cycle=short, drive_cycle_file=None, waiting_time=60.0, soc_targ=0.33,
                budget_t_chg=600.0, name="quick",
                controller=replace(nominal.controller, control_period_charge=30.0))
    base.update(changes)
    return replace(nominal, **base)


@pytest.fixture(scope="session")
def quick(nominal):
    return quick_scenario(nominal)


@pytest.fixture(scope="session")
def quick_path(quick, tmp_path_factory):
    path = tmp_path_factory.mktemp("scenario") / "quick.toml"
    save_scenario(quick, path)
    return path
