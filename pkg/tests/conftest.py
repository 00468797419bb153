import time

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): end-to-end acceptance criterion")
    config.stash[_RESULTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    if hasattr(item, "callspec"):
        title = f"{title} [{item.callspec.id}]"
    verdict = "PASS" if report.passed else "FAIL"
    item.config.stash[_RESULTS].append((str(number), verdict, title, report.duration))


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_RESULTS, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, title, duration in sorted(rows, key=lambda r: (int(r[0].rstrip("abcdefgh")), r[0])):
        terminalreporter.write_line(f"criterion {number:>3}: {verdict}  {title}  ({duration:.2f} s)")


@pytest.fixture
def stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
