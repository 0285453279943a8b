import re

_ACCEPTANCE: dict[int, tuple[str, str, float, list]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome == "failed":
        if report.outcome == "passed" and report.when != "call":
            return
        status = "PASS" if report.outcome == "passed" else "FAIL"
        details = [f"{k}={v}" for k, v in report.user_properties]
        _ACCEPTANCE[n] = (m.group(2).replace("_", " "), status, report.duration, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, status, seconds, details = _ACCEPTANCE[n]
        extra = f"  [{', '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {n} {status}: {name} ({seconds:.1f} s){extra}")
