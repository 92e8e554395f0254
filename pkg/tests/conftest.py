import numpy as np
import pytest

from nonprob.bigdata import SelectionModel, draw_big_dataset, selection_probabilities
from nonprob.population import default_config, synthesize_population


@pytest.fixture(scope="session")
def small_frame():
    return synthesize_population(default_config(n=20_000), seed=123)


@pytest.fixture(scope="session")
def small_big(small_frame):
    pi = selection_probabilities(small_frame, SelectionModel.sar())
    return draw_big_dataset(small_frame, pi, False, np.random.default_rng(9))
