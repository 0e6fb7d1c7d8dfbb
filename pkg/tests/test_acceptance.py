"""Acceptance suite at full size.

All ten criteria run once (module fixture); each test asserts one of them
and prints its pass/fail line.  Expect several minutes of runtime.
"""

import pytest

from peerfx.acceptance import CRITERIA, run_acceptance
from peerfx.pipeline import RunConfig


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    return run_acceptance(RunConfig({}), jobs=1, out_dir=out)


@pytest.mark.slow
@pytest.mark.parametrize("name", CRITERIA)
def test_criterion(report, name, capsys):
    result = next(r for r in report.results if r.name == name)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.summary
