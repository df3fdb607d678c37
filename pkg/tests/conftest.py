import numpy as np
import pytest

from diffkt3d.phantom import PhantomConfig, generate_case


@pytest.fixture(scope="session")
def small_cases():
    return [generate_case(s, PhantomConfig(site=site)) for s, site in
            ((3, "han"), (4, "lung"), (5, "prostate"))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
