"""Collects the acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def report(request):
    """Attach a one-line measurement summary to the current criterion."""
    def _report(text):
        request.node.user_properties.append(("detail", text))
    return _report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = marker.args
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    _RESULTS[n] = ("PASS" if rep.passed else "FAIL", title, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, details = _RESULTS[n]
        line = f"criterion {n:2d} {status}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
