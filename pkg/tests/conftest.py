import warnings
from pathlib import Path

import pytest

from voltvar.feeder import load_feeder, load_scenarios, load_timeseries
from voltvar.planner import solve_placement

DATA = Path(__file__).resolve().parents[1] / "src" / "voltvar" / "data"


def data(name: str) -> Path:
    return DATA / name


@pytest.fixture(scope="session")
def ieee13():
    return load_feeder(data("ieee13.feeder"))


@pytest.fixture(scope="session")
def ieee13_scenarios(ieee13):
    return load_scenarios(data("ieee13.scenarios"), ieee13)


@pytest.fixture(scope="session")
def ieee13_day(ieee13):
    return load_timeseries(data("ieee13_day.timeseries"), ieee13)


@pytest.fixture(scope="session")
def culprit():
    f = load_feeder(data("single_culprit.feeder"))
    return f, load_scenarios(data("single_culprit.scenarios"), f)


@pytest.fixture(scope="session")
def two_inverter():
    f = load_feeder(data("two_inverter.feeder"))
    return f, load_scenarios(data("two_inverter.scenarios"), f)


@pytest.fixture(scope="session")
def ieee13_plan(ieee13, ieee13_scenarios):
    """The over/under-voltage plan, solved once per session."""
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        return solve_placement(ieee13, ieee13_scenarios)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
