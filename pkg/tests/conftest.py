import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uwbpos.constants import SPEED_OF_LIGHT

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Lines printed by tests/test_acceptance.py, echoed again in the terminal summary.
ACCEPTANCE_LINES: list[str] = []

FS = 50e9
# One sample of propagation at FS, in meters.
SAMPLE_M = SPEED_OF_LIGHT / FS


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def aligned_anchors():
    """Anchor dicts whose distances to the origin are whole numbers of samples."""
    u = SAMPLE_M
    pts = [(300 * u, 400 * u), (-600 * u, 800 * u), (800 * u, -600 * u), (0.0, -1000 * u)]
    return [{"id": f"a{i}", "position": p} for i, p in enumerate(pts)]
