import math

import numpy as np
import pytest

from msgate.analytic import calibrate_gate
from msgate.dynamics import DriveConfig, PulseEnvelope, TrapParams

NU = 2 * math.pi * 1.23e6
ETA = 0.044
GAP = 2 * math.pi * 20e3
TAU_GATE = 50e-6
RISE = 2e-6
CUTOFF = 15

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def trap():
    return TrapParams(NU, ETA)


@pytest.fixture(scope="session")
def constant_drive():
    """Closed-form Rabi frequency, rectangular pulse of one gate time, zeta = 0."""
    return DriveConfig(GAP / (4 * ETA), NU - GAP, PulseEnvelope.rectangular(TAU_GATE))


@pytest.fixture(scope="session")
def shaped_calibration(trap):
    return calibrate_gate(trap, GAP, PulseEnvelope(RISE, TAU_GATE + RISE))


@pytest.fixture(scope="session")
def rectangular_calibration(trap):
    return calibrate_gate(trap, GAP, PulseEnvelope.rectangular(TAU_GATE))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
