"""Central finite differences shared by the gradient tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, params, name, step=STEP):
    """d f / d params[name] by central differences; ``params`` is a dict of arrays."""
    base = params[name]
    grad = np.zeros_like(base, dtype=float)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name].reshape(-1)[i] += step
        minus[name].reshape(-1)[i] -= step
        flat[i] = (f(plus) - f(minus)) / (2 * step)
    return grad


def rel_error(analytic, numeric, floor=1e-5):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor sits near the roundoff level of a central difference with step
    1e-5, so exact zeros are not compared against pure noise.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))
