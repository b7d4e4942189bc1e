import os

import numpy as np
import pytest

# Worker budget for parallel-capable operations in tests.
WORKERS = min(8, os.cpu_count() or 1)

_ACCEPTANCE_LINES: list[tuple[int, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion check."""

    def check(criterion: int, label: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {criterion:>2} {status}  {label}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append((criterion, line))
        assert ok, f"acceptance criterion {criterion} failed: {label} {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES, key=lambda pair: pair[0]):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
