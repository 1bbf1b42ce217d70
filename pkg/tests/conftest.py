import numpy as np
import pytest

from nkteams.landscape import build_matrix, generate_landscape


@pytest.fixture
def landscape():
    rng = np.random.default_rng(12345)
    return generate_landscape(build_matrix("unstructured", 12, 3, 4, rng), rng)


@pytest.fixture
def decomposable():
    rng = np.random.default_rng(54321)
    return generate_landscape(build_matrix("decomposable", 12, 3, 4), rng)


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
