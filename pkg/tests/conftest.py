import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from formation import SensingOperator, make_uniform_pattern, sample_binary_frames  # noqa: E402
from likelihood import PixelLikelihoodContext  # noqa: E402
from mlnet import TrainingSample  # noqa: E402
from synthesis import make_dct_dictionary  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_op():
    return SensingOperator(upsampling=2, sigma=1.0, truncation=2)


@pytest.fixture
def small_dictionary():
    # 3x3 patches, 16 atoms
    return make_dct_dictionary(3, 4)


def random_context(rng, shape, frames=4, q_max=5):
    q = rng.integers(1, q_max + 1, size=shape)
    n1 = rng.integers(0, frames + 1, size=shape)
    return PixelLikelihoodContext(q, frames - n1, n1)


def make_samples(count, op, rng, side=3, frames=4, seed=0):
    pattern = make_uniform_pattern(2, 2, 1, 4, seed=seed)
    samples = []
    for i in range(count):
        target = rng.uniform(0.5, 5.0, size=(side, side))
        stack = sample_binary_frames(op.forward(target), pattern, frames, seed + i)
        samples.append(TrainingSample(target, PixelLikelihoodContext.from_stack(stack)))
    return samples
