import numpy as np
import pytest

from vitresnas import autodiff as ad


@pytest.fixture(autouse=True)
def clean_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
