import numpy as np
import pytest

from trendex.chains import RandomStream
from trendex.harness import heston_test_model
from trendex.models import chain_from_model, make_vasicek

VASICEK = dict(alpha=0.05, beta=2.0, sigma=0.1, x0=0.03)


@pytest.fixture
def vasicek_model():
    return make_vasicek(**VASICEK)


@pytest.fixture
def vasicek_chain(vasicek_model):
    return chain_from_model(vasicek_model, 16)


@pytest.fixture
def heston_model():
    return heston_test_model()


@pytest.fixture
def stream():
    return RandomStream(seed=20240817)
