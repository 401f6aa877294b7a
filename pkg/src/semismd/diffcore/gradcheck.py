"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericalError
from .tensor import GradientTape, Tensor


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    saved = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with GradientTape() as tape:
            y = f(x)
        if not y.requires_grad:
            return np.zeros_like(x.data)
        tape.backward(y)
        g = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        tape.reset()
    finally:
        x.requires_grad = saved
        x.grad = None
    return g


def _eval(f, x) -> float:
    val = f(x).data
    if val.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {val.shape}")
    val = float(val.reshape(()))
    if not np.isfinite(val):
        raise NumericalError("finite_diff_check: f(x) is not finite")
    return val


def numeric_grad(f, x: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``f`` at ``x`` for the selected flat indices."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.full(flat.size, np.nan)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = _eval(f, x)
        flat[i] = orig - step
        fm = _eval(f, x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      floor: float = 1e-8, indices=None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` should be 64-bit. ``indices`` restricts the check to a subset of
    flat positions (useful for large parameter tensors).
    """
    _eval(f, x)
    a = analytic_grad(f, x).reshape(-1)
    n = numeric_grad(f, x, step, indices).reshape(-1)
    sel = np.arange(a.size) if indices is None else np.asarray(list(indices), dtype=int)
    if sel.size == 0:
        return 0.0
    return float(relative_error(a[sel], n[sel], floor).max())
