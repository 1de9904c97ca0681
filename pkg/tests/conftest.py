import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "psvit", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("psvit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)
