import pytest

# criterion number -> (title, [outcomes], [details])
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    n, title = crit
    entry = _CRITERIA.setdefault(n, (title, [], []))
    entry[1].append(report.outcome == "passed")
    detail = dict(report.user_properties).get("detail")
    if detail:
        entry[2].append(detail)


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", tuple(mark.args))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the acceptance report."""
    def put(text):
        record_property("detail", text)
    return put


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes, details = _CRITERIA[n]
        status = "PASS" if outcomes and all(outcomes) else "FAIL"
        tr.write_line("%s  criterion %2d  %s  [%d/%d tests]  %s" % (
            status, n, title, sum(outcomes), len(outcomes), "; ".join(details)))
