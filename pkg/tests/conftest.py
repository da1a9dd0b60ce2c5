import pytest

CRITERIA = {
    1: "harmonic-mean rows reproduced",
    2: "reference programs execute to their known answers",
    3: "analyzer agrees with the labeled corpus",
    4: "synthesis loop control flow",
    5: "switch training, calibration and decision rules",
    6: "replay determinism and resumability",
    7: "cost accounting",
    8: "prompt fidelity",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA):
        results = _outcomes.get(cid)
        if results is None:
            continue
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {cid}: {status}  {CRITERIA[cid]} ({sum(results)}/{len(results)})")
