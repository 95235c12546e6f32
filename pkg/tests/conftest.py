import numpy as np
import pytest


def central_diff(fn, arrays, h=1e-6):
    """Numeric gradient of scalar ``fn(*arrays)`` w.r.t. each array (numpy only)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = fn(*arrays)
            a[idx] = old - h
            down = fn(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# PASS/FAIL lines from the acceptance suite, repeated at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
