import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[_LINES] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return report
    if report.when == "setup" and report.passed:
        return report
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    verdict = "PASS" if report.passed else "FAIL"
    line = f"{verdict} criterion {number}: {title}" + (f" [{detail}]" if detail else "")
    item.config.stash[_LINES][number] = line
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
