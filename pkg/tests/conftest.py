import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fdnoma.channel import SystemConfig, make_instance

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def desk_instance(seed: int, **changes):
    cfg = SystemConfig.desk(**changes) if changes else SystemConfig.desk()
    _, ch = make_instance(cfg, seed)
    return cfg, ch


@pytest.fixture
def desk():
    return desk_instance(11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
