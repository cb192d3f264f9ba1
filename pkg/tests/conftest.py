from collections.abc import Callable, Sequence

import numpy as np
import pytest

from dualflow.tensor_core import Tensor, backward, default_dtype, no_grad


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests that train models")
    parser.addoption("--acceptance", action="store_true", default=False, help="run the full training recipes")


def pytest_collection_modifyitems(config, items):
    skip_slow = pytest.mark.skip(reason="trains a model; pass --runslow to run")
    skip_acceptance = pytest.mark.skip(reason="full training recipe; pass --acceptance to run")
    for item in items:
        if "acceptance" in item.keywords and not config.getoption("--acceptance"):
            item.add_marker(skip_acceptance)
        elif "slow" in item.keywords and not config.getoption("--runslow"):
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64():
    """Unit tests run in 64-bit arithmetic."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().data)
            flat[i] = old - eps
            down = float(fn().data)
            flat[i] = old
            grad.reshape(-1)[i] = (up - down) / (2.0 * eps)
    return grad


@pytest.fixture
def gradcheck():
    """Compare reverse-mode gradients of ``fn`` with central differences."""

    def check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], rtol: float = 1e-4, atol: float = 1e-7) -> None:
        grads = backward(fn(), list(tensors))
        for tensor in tensors:
            np.testing.assert_allclose(grads[tensor], numeric_gradient(fn, tensor), rtol=rtol, atol=atol)

    return check
