import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, idx, h=1e-5):
    """Central difference of scalar ``f`` with respect to ``x[idx]`` (in place, restored)."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-5):
    return abs(a - b) / max(abs(a), abs(b), floor)


# one line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
