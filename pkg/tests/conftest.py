import numpy as np
import pytest

from discourse_rater import tensor as T


@pytest.fixture(autouse=True)
def _reset_global_dtype():
    yield
    T.set_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
