import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from levikit.coeffs import CoefficientField

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

MILD_N1 = 0.6621  # 1.1 x the dense-grid Hoelder estimate of 2 + 0.5 sin(x) cos(t)


def make_mild_field(N1=MILD_N1):
    return CoefficientField.from_expressions(
        1, {(1, 1): "2 + 0.5*sin(x1)*cos(t)"}, kappa=1.5, M=2.5, N1=N1, N2=0.0, alpha=1.0)


@pytest.fixture(scope="session")
def mild_field():
    return make_mild_field()


@pytest.fixture(scope="session")
def heat_field():
    return CoefficientField.constant([[1.0]], kappa=1.0, M=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(lo, hi, n)) @ q.T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
