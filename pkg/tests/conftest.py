import os
import time
import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng(request):
    # stable per-test stream
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture(scope="session")
def desk_timed():
    """Desk-default pipeline data (classifier, CAMs, pseudo labels; 100 train / 50 test) and its build time."""
    from mfnet.trainer import TrainConfig, prepare
    t0 = time.perf_counter()
    prepared = prepare(TrainConfig(), n_train=100, n_test=50)
    return prepared, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk(desk_timed):
    return desk_timed[0]
