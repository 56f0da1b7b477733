import numpy as np
import pytest

from mapf import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
