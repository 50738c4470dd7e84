import numpy as np
import pytest

from sparsect import tensor as T


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    yield
    T.set_default_dtype(np.float64)
