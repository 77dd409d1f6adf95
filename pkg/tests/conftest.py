import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'graydyn'))

from systems.double_pendulum import DoublePendulumParams, true_system  # noqa: E402
from systems.sampling import SamplingSpec, sample_transitions  # noqa: E402


@pytest.fixture
def params():
    return DoublePendulumParams.nominal()


@pytest.fixture
def system(params):
    return true_system(params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset(system):
    return sample_transitions(system, SamplingSpec(count=4, seed=7))

