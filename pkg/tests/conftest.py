import numpy as np
import pytest

# criterion id -> {"title", "ok", "details"}; filled from tests marked ``acceptance``
_CRITERIA: dict = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Attach a measured value to the current test's acceptance line."""
    mark = request.node.get_closest_marker("acceptance")

    def add(text: str) -> None:
        if mark is not None:
            _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "details": []})
            _CRITERIA[mark.args[0]]["details"].append(text)
        print(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERIA):
        entry = _CRITERIA[key]
        line = f"{key} {'PASS' if entry['ok'] else 'FAIL'}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
