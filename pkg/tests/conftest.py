import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dualplast.checks import benchmark_model
from dualplast.material import DimMode

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

E, NU, SIGMA_Y, H_ISO = 70.0, 0.2, 0.243, 2.24


@pytest.fixture
def model():
    return benchmark_model()


@pytest.fixture
def model3d():
    return benchmark_model(DimMode.THREE_D)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ---------------------------------------------------------------

_ACCEPTANCE = []
_DETAILS = {}


@pytest.fixture
def detail(request):
    """Dict the acceptance tests fill with measured values for the summary line."""
    d = _DETAILS.setdefault(request.node.nodeid, {})
    return d


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        number = name.split("_")[2]
        d = _DETAILS.get(report.nodeid, {})
        info = ", ".join(f"{k}={v}" for k, v in d.items())
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE.append((int(number), f"{verdict}  criterion {number}  {info}"))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
