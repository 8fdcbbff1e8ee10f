import numpy as np
import pytest

from dynfield.geometry import DESK_SYSTEM, DomainBox


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box():
    return DomainBox(1.45, 5.0)


@pytest.fixture
def desk():
    return DESK_SYSTEM


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n} {'PASS' if ok else 'FAIL'} {detail}")
