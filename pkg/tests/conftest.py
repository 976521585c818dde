import numpy as np
import pytest

from taml.worldgen import BenchmarkSpec, make_benchmark


@pytest.fixture(scope="session")
def bench():
    return make_benchmark(BenchmarkSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))
