"""Per-criterion bookkeeping for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, title)`` are grouped; a criterion
passes only when every test in its group passed. One line per criterion is
printed at the end of the session, with any values the tests recorded through
the ``measure`` fixture.
"""

import pytest

RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


def _entry(item):
    m = item.get_closest_marker("criterion")
    if m is None:
        return None
    n, title = m.args
    return RESULTS.setdefault(n, {"title": title, "status": "PASS", "tests": 0, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["status"] = "FAIL"
    elif rep.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"


@pytest.fixture
def measure(request):
    entry = _entry(request.node)

    def note(text: str) -> None:
        if entry is not None:
            entry["notes"].append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(RESULTS):
        e = RESULTS[n]
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n}: {e['status']}  {e['title']} "
                                    f"({e['tests']} tests){'  ' + notes if notes else ''}")
