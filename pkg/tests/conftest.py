import numpy as np
import pytest

from qsmkit.tensor import no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff_grad(f, x, h=1e-5):
    """Independent finite-difference oracle; f() is re-run per coordinate."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())
