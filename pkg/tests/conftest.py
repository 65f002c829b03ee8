import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from glue_lab import gluing as gl
from glue_lab.domain import DomainConfig

settings.register_profile(
    "glue",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile("glue")

BASE_CFG = DomainConfig(trunc=56.0)


@pytest.fixture(scope="session")
def fx_m0():
    return gl.fixture_m0(BASE_CFG)


@pytest.fixture(scope="session")
def fx_m1():
    return gl.fixture_m1(BASE_CFG)


@pytest.fixture(scope="session")
def small_cfg():
    return DomainConfig(h_tau=0.25, n_t=8, trunc=12.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
