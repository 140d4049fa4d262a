import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("idflow", max_examples=60, deadline=None)
settings.load_profile("idflow")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("IDFLOW_SEED", raising=False)
    yield


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record ``(criterion, passed, detail)``; printed in the terminal summary."""
    def record(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
