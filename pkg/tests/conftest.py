import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wide():
    from runet.tensor import wide_precision
    with wide_precision():
        yield


def pytest_runtest_logreport(report):
    # a criterion that crashed before reporting still gets a FAIL line
    if "test_acceptance" in report.nodeid and report.failed:
        import acceptance_log
        if not any(node == report.nodeid for node, _ in acceptance_log.LINES):
            acceptance_log.LINES.append((report.nodeid, f"FAIL  {report.nodeid}: {report.when} error"))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in acceptance_log.LINES:
            terminalreporter.write_line(line)
