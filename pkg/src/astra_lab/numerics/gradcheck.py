"""Finite-difference gradient oracle.

Used throughout the test suite as the independent reference that
tape-based reverse-mode gradients are checked against.
"""

from __future__ import annotations

import numpy as np

from .tape import Parameter

__all__ = ["finite_diff_grad", "max_rel_error", "check_gradients"]


def finite_diff_grad(f, param: Parameter, eps=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param``.

    ``f`` takes no arguments and reads ``param.value``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = param.value
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value in finite differences")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6) -> float:
    """Max elementwise relative error with an absolute floor on the scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f, params, eps=1e-5, floor=1e-6) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``f`` takes no arguments, reads the given params, and returns the loss
    node.  It is invoked once under a fresh tape for analytic gradients and
    repeatedly without a tape for the central-difference reference.
    """
    from .tape import Tape

    params = list(params)
    with Tape() as tape:
        root = f()
        grads = tape.gradients(root, params)

    def value_only():
        out = f()
        return float(np.asarray(out.value if hasattr(out, "value") else out))

    worst = 0.0
    for p in params:
        numeric = finite_diff_grad(value_only, p, eps=eps)
        worst = max(worst, max_rel_error(grads[p], numeric, floor=floor))
    return worst
