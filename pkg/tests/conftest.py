import numpy as np
import pytest

from resrom import fom, geo


@pytest.fixture
def grid16():
    return geo.build_grid(16, 16)


@pytest.fixture
def props():
    return fom.FluidProps()


@pytest.fixture
def rng():
    return np.random.default_rng(42)
