import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geoulm.sim import PulseModel
from geoulm.types import AcquisitionConfig, Region, linear_array

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def acq():
    return AcquisitionConfig()


@pytest.fixture
def geo():
    return linear_array(128)


@pytest.fixture
def pulse():
    return PulseModel()


@pytest.fixture
def calibrated(acq, pulse):
    """Acquisition with the transmit delay offset set from the pulse template."""
    from dataclasses import replace
    return replace(acq, transmit_delay_offset=pulse.onset_delay(acq))


@pytest.fixture
def field():
    return Region.centered(5e-3, 5e-3, 10e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


verdicts = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the terminal summary."""
    lines = request.config.stash.setdefault(verdicts, [])

    def record(name, ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
