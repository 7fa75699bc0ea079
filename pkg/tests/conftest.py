import time
from contextlib import contextmanager

import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Context manager that times an acceptance criterion and logs one PASS/FAIL line.

    The body raising, or the runtime exceeding ``limit`` seconds, marks it failed.
    """
    @contextmanager
    def run(number, title, limit):
        start = time.perf_counter()
        try:
            yield
        except BaseException:
            _log(number, title, False, time.perf_counter() - start, limit)
            raise
        elapsed = time.perf_counter() - start
        _log(number, title, elapsed <= limit, elapsed, limit)
        assert elapsed <= limit, f"criterion {number} took {elapsed:.1f} s, limit {limit} s"
    return run


def _log(number, title, ok, elapsed, limit):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} ({elapsed:.2f} s, limit {limit} s)"
    _LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
