import functools

import pytest

from critmargin.agents import greedy_policy, train_q_learning


@functools.lru_cache(maxsize=None)
def trained_q(spec: str, episodes: int, lr: float, gamma: float, seed: int = 0):
    return train_q_learning(spec, episodes, lr, gamma, seed=seed)


@pytest.fixture(scope="session")
def line_policy():
    return greedy_policy(trained_q("line_world(4)", 500, 0.5, 0.9))


@pytest.fixture(scope="session")
def cliff_q():
    return trained_q("grid_cliff(4,12)", 5000, 0.1, 0.99)


@pytest.fixture(scope="session")
def cliff_policy(cliff_q):
    return greedy_policy(cliff_q)


# acceptance criteria: one pass/fail line each at the end of the run
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
