import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = "PASS" if report.outcome == "passed" else "FAIL"
        prev = _RESULTS.get(n)
        if prev is not None:
            status = "FAIL" if "FAIL" in (status, prev[0]) else "PASS"
            detail = "; ".join(d for d in (prev[1], detail) if d)
        _RESULTS[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        line = f"CRITERION {n:>2} {status}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
