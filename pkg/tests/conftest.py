import numpy as np
import pytest

from patchmoe import tensor as T


@pytest.fixture(autouse=True)
def _f64_default():
    # Every test starts (and leaves) the library in 64-bit mode.
    T.set_precision("f64")
    yield
    T.set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
