"""Acceptance suite: runs every criterion at its stated settings and prints
one pass/fail line per criterion.

The real-data protocol criterion is skipped (with a warning) when the a9a
dataset has not been fetched into the data directory.
"""
import pytest

from localsgd import verify


@pytest.mark.parametrize("criterion", verify.CRITERIA,
                         ids=[fn.__name__.removeprefix("criterion_")
                              for fn in verify.CRITERIA])
def test_criterion(criterion):
    result = criterion("full")
    print(result.line())
    if result.status == verify.SKIP:
        pytest.skip(result.details)
    assert result.status == verify.PASS, result.details
