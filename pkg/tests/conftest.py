import re

# criterion number -> detail line, filled in by tests/test_acceptance.py
ACCEPTANCE_DETAILS = {}


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and getattr(rep, "when", "call") in ("call", "setup"):
                n = int(m.group(1))
                # a setup error or call failure wins over an earlier pass record
                if outcomes.get(n) != "FAIL":
                    outcomes[n] = "PASS" if status == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        detail = ACCEPTANCE_DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n}: {outcomes[n]}  {detail}".rstrip())
