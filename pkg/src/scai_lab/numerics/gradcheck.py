"""Central finite-difference gradient checks."""

import numpy as np


def numeric_grad(fn, point, eps=1e-5):
    """Central differences of scalar ``fn`` at ``point`` (dict name -> array)."""
    out = {}
    for name, arr in point.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(point))
            flat[i] = orig - eps
            fm = float(fn(point))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def finite_diff_check(fn, grad_fn, point, eps=1e-5):
    """Max over parameters of the relative error of ``grad_fn`` vs central differences.

    Per parameter the error is max|a - n| / max(max|a|, max|n|); a parameter
    whose analytic and numeric gradients are both zero contributes 0.
    """
    analytic = grad_fn(point)
    numeric = numeric_grad(fn, point, eps)
    worst = 0.0
    for name, n in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        if scale == 0:
            continue
        worst = max(worst, float(np.abs(a - n).max()) / scale)
    return worst
