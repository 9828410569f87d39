import numpy as np
import pytest

from raas.core import BaselineHazard, FinancialParams, GroundTruth

U_TRUE = np.array([0.37, 0.11, 0.34, 0.71])
THETA_TRUE = np.array([0.5, 0.2, 0.4, 0.3])
LAMBDA_TRUE = 0.001


@pytest.fixture
def truth():
    return GroundTruth(U_TRUE, THETA_TRUE, BaselineHazard.constant(LAMBDA_TRUE))


@pytest.fixture
def fin():
    return FinancialParams()


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record and print a PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
