import numpy as np
import pytest

from textdistill import tensor as T


@pytest.fixture
def f64():
    """Run a test body under float64 (gradient suites use this)."""
    with T.using_dtype(np.float64):
        yield


def fd_grad(f, arrays, which, step=1e-4):
    """Central finite-difference gradient of scalar f wrt arrays[which].

    ``f`` maps a list of numpy arrays to a float.  The step per entry is
    ``step`` scaled by the entry's magnitude (floor 1).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    x = arrays[which]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        h = step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.linalg.norm(want.reshape(-1)), 1e-12)
    return np.linalg.norm((got - want).reshape(-1)) / denom
