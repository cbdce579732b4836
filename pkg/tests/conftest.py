import numpy as np
import pytest

from advlab.data import ToyConfig, generate_toy
from advlab.model import Mlp, MlpSpec


def central_difference(f, x, h=1e-5):
    """Numerical gradient of a scalar function of one array, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.copy())
        flat[i] = orig - h
        fm = f(x.copy())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def toy_train():
    return generate_toy(ToyConfig(n_per_class=200, seed=11))


@pytest.fixture(scope="session")
def toy_test():
    return generate_toy(ToyConfig(n_per_class=100, seed=12))


@pytest.fixture
def toy_model():
    return Mlp.init(MlpSpec(), seed=3)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
