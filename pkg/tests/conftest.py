"""Shared pytest plumbing: acceptance-suite pass/fail reporting.

Each acceptance test wraps its body in the `criterion` context manager, which
times it, enforces the runtime budget, and records one line for the terminal
summary, so the run ends with a single printed verdict per criterion.
"""

import time
from contextlib import contextmanager

import pytest

_RESULTS: list[tuple[int, str, str, float, str]] = []


@pytest.fixture(scope="session")
def criterion():
    @contextmanager
    def run(num: int, name: str, budget_s: float):
        t0 = time.time()
        try:
            yield
        except BaseException as e:
            dt = time.time() - t0
            _RESULTS.append((num, name, "FAIL", dt, f"{type(e).__name__}"))
            print(f"\ncriterion {num:2d} [{name}] FAIL after {dt:.1f}s")
            raise
        dt = time.time() - t0
        if dt > budget_s:
            _RESULTS.append((num, name, "FAIL", dt, f"over {budget_s:.0f}s budget"))
            print(f"\ncriterion {num:2d} [{name}] FAIL: {dt:.1f}s over budget")
            pytest.fail(f"criterion {num} exceeded its runtime budget: "
                        f"{dt:.1f}s > {budget_s:.0f}s")
        _RESULTS.append((num, name, "PASS", dt, ""))
        print(f"\ncriterion {num:2d} [{name}] PASS in {dt:.1f}s")

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, status, dt, note in sorted(_RESULTS):
        line = f"criterion {num:2d}  {status}  {dt:8.1f}s  {name}"
        if note:
            line += f"  ({note})"
        terminalreporter.write_line(line)
