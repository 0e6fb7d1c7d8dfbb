import numpy as np
import pytest

from peerfx import synth
from peerfx.core import filter_estimation_sample
from peerfx.employability import attach_scores, run_scoring
from peerfx.models import analysis_table


@pytest.fixture(scope="session")
def small_generated():
    """One small synthetic draw (about 5k participants) and its ground truth."""
    return synth.generate(synth.acceptance_config(seed=7))


@pytest.fixture(scope="session")
def small_scored(small_generated):
    ds, _ = small_generated
    result = run_scoring(ds)
    return attach_scores(ds, result), result


@pytest.fixture(scope="session")
def small_table(small_scored):
    ds, _ = small_scored
    return analysis_table(filter_estimation_sample(ds))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
