import numpy as np
import pytest

from gliomaseg.synthetic import make_subject, write_subject


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_subject(rng):
    return make_subject("BraTS19_TEST_001", shape=(40, 40, 32), rng=rng)


@pytest.fixture
def subject_dir(tmp_path, small_subject):
    root = tmp_path / "data"
    write_subject(small_subject, root)
    return root


_ACCEPTANCE_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): headline acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE_RESULTS.append((marker.args[0], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration in _ACCEPTANCE_RESULTS:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({duration:.1f} s)")
