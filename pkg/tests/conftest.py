import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("physface", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("physface")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
