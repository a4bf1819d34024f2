"""Finite-difference verification of analytic gradients.

Central differences in float64 against `Tensor.backward`, reported as the
worst per-coordinate relative error.  Objectives must be deterministic
functions of the parameters (re-evaluated many times).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def analytic_gradients(objective, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    out = objective()
    out.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def central_difference_gradients(objective, params: list[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = float(objective().data)
            flat[i] = orig - h
            f_minus = float(objective().data)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray], floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) across all coordinates."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(objective, params: list[Tensor], rtol: float = 1e-4, step: float = 1e-5) -> float:
    """Verify backward() against central differences; returns the worst
    relative error and raises AssertionError above `rtol`."""
    ana = analytic_gradients(objective, params)
    num = central_difference_gradients(objective, params, step=step)
    err = max_relative_error(ana, num)
    if err > rtol:
        raise AssertionError(f"gradient check failed: relative error {err:.3e} > {rtol:.1e}")
    return err
