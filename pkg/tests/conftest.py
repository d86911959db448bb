import sys

import numpy as np
import pytest
from hypothesis import settings

from dtcbf.core_model import Cbf, ControlAffineSystem

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def integrator(n=1):
    return ControlAffineSystem(n=n, m=n, f=lambda x: np.zeros(n), B=lambda x: np.eye(n))


def decay(n=1):
    return ControlAffineSystem(n=n, m=1, f=lambda x: -x, B=lambda x: np.zeros((n, 1)))


def unit_interval_cbf(alpha=lambda r: r):
    """``h = 1 - x^2`` on a scalar state."""
    return Cbf(lambda x: 1.0 - x[0] ** 2, lambda x: np.array([-2.0 * x[0]]), alpha,
               lambda x: np.array([[-2.0]]))


@pytest.fixture
def toy():
    return integrator(1), unit_interval_cbf()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
