import numpy as np
import pytest

from swinlab.autodiff import set_debug


@pytest.fixture(autouse=True)
def debug_mode():
    set_debug(True)
    yield
    set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
