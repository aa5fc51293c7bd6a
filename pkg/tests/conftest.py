import numpy as np
import pytest
import torch

from gliomaseg.train import set_deterministic

_ACCEPTANCE = {}


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        prev = _ACCEPTANCE.get(name)
        if prev is None or prev == "PASS":
            _ACCEPTANCE[name] = "PASS" if report.outcome == "passed" else report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[1][2:]) if n.startswith("test_ac") else 99):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:<6} {name}")
