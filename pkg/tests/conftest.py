"""Shared fixtures: seeded generators, the default schedule and the 2D Gaussian oracle."""

import numpy as np
import pytest

from src.diffusion import NoiseSchedule
from src.operators import GAUSS2D_COV, GAUSS2D_MEAN
from src.score import AnalyticGaussianScore
from src.tensorcore import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def sched():
    return NoiseSchedule()


@pytest.fixture
def gauss_oracle(sched):
    return AnalyticGaussianScore(np.asarray(GAUSS2D_MEAN), np.diag(GAUSS2D_COV), sched)
