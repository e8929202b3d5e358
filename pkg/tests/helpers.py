"""Shared test utilities: central finite differences and error metrics."""

import numpy as np


def fd_gradient(loss_fn, array, h=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``array`` (in place).

    ``loss_fn`` must recompute the loss from current array contents and
    return a python float.  The array is restored before returning.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def max_rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with a denominator floor.

    The floor keeps central-difference roundoff on near-zero entries from
    dominating: entries where both gradients are below ``floor`` still must
    agree to ``floor * tolerance`` absolutely.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
