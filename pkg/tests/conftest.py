import numpy as np
import pytest

from birdflux.tessellation import build_hex_patch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def patch7():
    return build_hex_patch(1, 137.5)


@pytest.fixture(scope="session")
def patch19():
    return build_hex_patch(2, 137.5)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
