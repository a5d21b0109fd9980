import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

_RESULTS = {}


@pytest.fixture
def measured(request):
    """Attach a short measured-value note to the current acceptance test."""
    def note(text):
        request.node.user_properties.append(("measured", text))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        notes = [v for k, v in item.user_properties if k == "measured"]
        if rep.skipped and isinstance(rep.longrepr, tuple):
            notes.append(rep.longrepr[2])
        _RESULTS[item.nodeid] = (mark.args[0], item.name, status, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    by_n = {}
    for n, name, status, note in _RESULTS.values():
        by_n.setdefault(n, []).append((name, status, note))
    for n in sorted(by_n):
        parts = sorted(by_n[n])
        statuses = {s for _, s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        detail = "; ".join(f"{name} {s}" + (f" ({note})" if note else "") for name, s, note in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {overall}  {detail}")
