import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title, ok, detail, secs in sorted(mod.RESULTS):
        tr.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail} ({secs:.0f}s)")
