import pytest

from dds_sim.accounting import MOVES


@pytest.fixture(autouse=True)
def fresh_moves():
    MOVES.reset()
    yield MOVES
    MOVES.reset()


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        elif rep.failed:
            detail = rep.longreprtext.strip().splitlines()[-1][:160]
        prev = _CRITERIA.get(number)
        # a criterion with several tests fails if any of them fails
        if prev is None or prev[1] == "PASS" or verdict == "FAIL":
            _CRITERIA[number] = (title, verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {verdict}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
