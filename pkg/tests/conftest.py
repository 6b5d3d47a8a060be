import numpy as np
import pytest

from pgdiff import tensor as tc

# acceptance tests append "ACCEPTANCE n name: PASS/FAIL ..." lines here; the
# summary hook reprints them after the run so they are visible even when
# pytest captures stdout
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _clean_tape():
    # a test that fails mid-backward must not leak tape records into the next
    tc.reset_tape()
    yield
    tc.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
