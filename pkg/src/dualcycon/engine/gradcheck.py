"""Central finite-difference gradients for checking backward passes."""

import numpy as np


def numeric_grad(f, arr, h=1e-5, indices=None):
    """d f() / d arr by central differences, perturbing ``arr`` in place.

    ``indices`` restricts the check to a subset of flat positions; the other
    entries of the result are NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def max_rel_error(analytic, numeric, floor=1e-10):
    """Largest absolute deviation scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)
