import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            detail = "; ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            status = "PASS" if outcome == "passed" else "FAIL"
            lines[int(m.group(1))] = f"criterion {int(m.group(1)):2d} {status}  {m.group(2)}  {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
