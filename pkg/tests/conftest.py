import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamevo import tensor as tn

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_default():
    """Gradient checks and exact-equality oracles need 64-bit arithmetic."""
    with tn.default_dtype(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
