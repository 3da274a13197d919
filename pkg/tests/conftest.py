import sys

import numpy as np
import pytest

from mgcp import kernels


def pytest_configure(config):
    # Compile (or load cached) kernels once so no test pays compile time
    # inside a timed section.
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    if request.param == "numba" and kernels.nb is None:
        pytest.skip("numba not installed")
    old = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
