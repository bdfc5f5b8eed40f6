"""Acceptance criteria at their stated tolerances, one PASS/FAIL line each.

Run ``python3 tests/test_acceptance.py`` for the report alone.
"""

import pytest

from tubespec import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("criterion", acceptance.CRITERIA, ids=lambda f: f.__name__)
def test_criterion(criterion, pipeline, capsys):
    result = criterion(pipeline)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()


if __name__ == "__main__":
    pl = acceptance.Pipeline()
    results = acceptance.evaluate_all(pl)
    for r in results:
        print(r.line())
    raise SystemExit(0 if all(r.passed for r in results) else 1)
