import time

import pytest

SUITE_BUDGET_SECONDS = 600.0
_start: dict[str, float] = {}


def pytest_sessionstart(session):
    _start["t"] = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - _start.get("t", time.perf_counter())
    ok = elapsed < SUITE_BUDGET_SECONDS
    terminalreporter.write_line(
        f"{'PASS' if ok else 'FAIL'} criterion 11 (suite runtime): {elapsed:.0f}s for this session, budget {SUITE_BUDGET_SECONDS:.0f}s"
    )


@pytest.hookimpl(trylast=True)
def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _start.get("t", time.perf_counter())
    if elapsed >= SUITE_BUDGET_SECONDS and session.exitstatus == 0:
        session.exitstatus = 1
