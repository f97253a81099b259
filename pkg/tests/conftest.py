from __future__ import annotations

import sys

import numpy as np
import pytest

from aos.model import preset
from aos.solver import warm_up


@pytest.fixture(scope="session")
def warm():
    """Compiled kernels loaded once so wall-time assertions exclude it."""
    warm_up()


@pytest.fixture(scope="session")
def std():
    return preset("STD")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
