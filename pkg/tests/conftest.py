"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""
import re

_results: dict[str, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        label = f"criterion {m.group(1)} ({m.group(2).replace('_', ' ')})"
        detail = ", ".join(f"{k}={v}" for k, v in report.user_properties)
        _results[m.group(1)] = (label, "PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results, key=int):
        label, status, detail = _results[key]
        terminalreporter.write_line(f"{status}  {label}" + (f": {detail}" if detail else ""))
