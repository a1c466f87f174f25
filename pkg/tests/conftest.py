"""Shared helpers for the test suite: finite differences and error metrics."""

import numpy as np


def central_fd(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_err(approx, exact):
    """Max elementwise |a-e| / max(|e|, 1): relative at scale, absolute below it."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), 1.0)))


def rel_err(approx, exact):
    """Strict relative error for scalars known to be away from zero."""
    return abs(approx - exact) / abs(exact)
