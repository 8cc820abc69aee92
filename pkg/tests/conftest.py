"""Shared test helpers: an independent central-difference gradient oracle."""

import numpy as np


def central_diff(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences.

    Test-side oracle, deliberately independent of the package's analytic
    backward passes and of its own grad-check utility.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    gflat = grad.ravel()
    for j in range(x.size):
        xp = x.copy()
        xp.ravel()[j] += step
        xm = x.copy()
        xm.ravel()[j] -= step
        gflat[j] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


def rel_err(a, b, floor=1e-8):
    """Max elementwise relative error with denominator max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
