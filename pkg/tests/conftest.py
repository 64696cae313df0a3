import numpy as np
import pytest

from consensus_forge.config import parse_config, pendulum_config
from consensus_forge.synthesis import spectral_data, synthesize


@pytest.fixture(scope="session")
def pendulum_doc():
    return pendulum_config()


@pytest.fixture(scope="session")
def pendulum(pendulum_doc):
    return parse_config(pendulum_doc)


@pytest.fixture(scope="session")
def spec(pendulum):
    return pendulum.spec


@pytest.fixture(scope="session")
def spectral(spec):
    return spectral_data(spec)


@pytest.fixture(scope="session")
def cert_th1(spec):
    return synthesize(spec, "th1")


@pytest.fixture(scope="session")
def cert_th2(spec):
    return synthesize(spec, "th2")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
