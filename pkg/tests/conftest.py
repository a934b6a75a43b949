import sys

import numpy as np
import pytest

from kpdeblur.numerics import precision


@pytest.fixture(autouse=True)
def _f64():
    # oracles and gradient checks run at 64-bit; 32-bit tests opt back in
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
