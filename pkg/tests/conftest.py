import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# bit-reproducibility checks assume single-threaded BLAS
threadpool_limits(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
