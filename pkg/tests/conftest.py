import pytest

_LINES = pytest.StashKey[dict]()
_DETAIL = pytest.StashKey[str]()


def pytest_configure(config):
    config.stash[_LINES] = {}
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion's PASS/FAIL line."""
    def put(text: str) -> None:
        request.node.stash[_DETAIL] = text
    return put


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    status = "FAIL" if rep.failed else "PASS"
    extra = item.stash.get(_DETAIL, "")
    line = f"{status} criterion {number:>2}: {title}" + (f" [{extra}]" if extra else "")
    lines = item.config.stash[_LINES]
    if status == "FAIL" or number not in lines:
        lines[number] = line


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
