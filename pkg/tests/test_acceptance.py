"""One test per acceptance criterion; each prints a PASS/FAIL line."""
import pytest

from dgs.acceptance import CHECKS, run_check

RESULTS = []


@pytest.mark.parametrize("number", sorted(CHECKS), ids=lambda n: f"criterion_{n}")
def test_criterion(number):
    result = run_check(number)
    RESULTS.append(result)
    print(result.line())
    assert result.passed, result.line()
