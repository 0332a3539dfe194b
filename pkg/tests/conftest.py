import re

_CRITERIA = {
    "c01": "gradient suite",
    "c02": "attention invariants",
    "c03": "adversarial-loss identities",
    "c04": "total-loss composition",
    "c05": "Dice oracle",
    "c06": "DFT oracle",
    "c07": "spectrum direction",
    "c08": "directional gain over baseline",
    "c09": "ablation harness",
    "c10": "determinism",
}
_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance-criterion checks")


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(c\d\d)_", report.nodeid)
    if not m:
        return
    key = m.group(1)
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[key] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key, label in _CRITERIA.items():
        if key in _outcomes:
            terminalreporter.write_line(f"criterion {int(key[1:])} ({label}): {_outcomes[key]}")
