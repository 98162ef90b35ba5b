import numpy as np
import pytest

from regionnorm.tensor import clear_tape, default_dtype


@pytest.fixture
def f64():
    """Run a test at float64 precision (gradient oracles need it)."""
    with default_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def _fresh_tape():
    clear_tape()
    yield
    clear_tape()
