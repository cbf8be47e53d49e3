import pytest

# criterion number -> (title, [outcomes], [notes])
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.fixture
def note(request):
    """Attach a measured value to the current test's acceptance line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _CRITERIA.setdefault(marker.args[0], (marker.args[1], [], []))[2].append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, (title, [], []))
    if rep.when == "call" or rep.failed:
        entry[1].append(rep.passed and rep.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, results, notes = _CRITERIA[n]
        status = "PASS" if results and all(results) else "FAIL"
        extra = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}{extra}")
