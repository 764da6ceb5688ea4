"""Shared numerical oracles for the test suite."""

from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    """Norm-wise relative error with a small absolute floor for near-zero gradients."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), floor))


def straight_walker(width: float = 0.08, length: float = 0.12):
    """Hand-set planner weights: a straight path ahead and alternating steps by stance parity."""
    import math

    from bipedplan.nets import STATE_FEATURES, init_weights

    w = init_weights(0)
    arrays = [np.zeros_like(a) for a in w.arrays()]
    n = len(w.path.arrays())
    arrays[n - 1] = np.column_stack([0.15 * np.arange(1, w.k), np.zeros(w.k - 1)]).reshape(-1)
    # route the parity feature through both hidden layers to the first step's lateral output
    arrays[n][2 * w.k + STATE_FEATURES - 1, 0] = 1.0
    arrays[n + 2][0, 0] = 1.0
    arrays[n + 4][0, 1] = -width / math.tanh(math.tanh(1.0))
    arrays[-1][0] = length
    return w.with_arrays(arrays)
