import numpy as np
import pytest


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar f over every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        dn = f(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * h)
    return g


def central_diff_tensor(f_scalar, t, h=1e-6):
    """Central differences of f_scalar() over the entries of leaf tensor t.

    f_scalar takes no arguments and reads t.values afresh on every call.
    """
    base = t.values.copy()
    g = np.zeros_like(base)
    flat = t.values.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f_scalar()
        flat[i] = orig - h
        dn = f_scalar()
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * h)
    t.values = base
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1e-12, float(np.abs(a).max()), float(np.abs(b).max()))
    return float(np.abs(a - b).max()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
