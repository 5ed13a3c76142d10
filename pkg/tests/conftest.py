import contextlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtlora.tensor import clear_tape

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _fresh_tape():
    clear_tape()
    yield
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Criterion:
    def __init__(self):
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the block."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = _Criterion()
        ok = False
        try:
            yield c
            ok = True
        finally:
            status = "PASS" if ok else "FAIL"
            line = f"criterion {number} [{status}] {title}"
            if c.details:
                line += ": " + "; ".join(c.details)
            ACCEPTANCE_LINES.append(line)
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
