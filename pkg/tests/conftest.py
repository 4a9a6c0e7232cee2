import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from feelsched.numerics import RngStream
from feelsched.system import DeviceProfile, SystemConfig

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return RngStream(2024, 1)


@pytest.fixture
def cfg():
    return SystemConfig()


def random_instance(rng, cfg, n, f_lo=0.2e9):
    """Devices with random power, path loss, CPU speed and channel draw."""
    profiles = [DeviceProfile(k, 10 ** rng.uniform(-2, 0), 10 ** rng.uniform(-2, 2)) for k in range(n)]
    f = {k: rng.uniform(f_lo, 1.5e9) for k in range(n)}
    gains = np.array([p.pathloss * rng.exponential() for p in profiles])
    return profiles, f, gains


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def check(criterion: int, name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
