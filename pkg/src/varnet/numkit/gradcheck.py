from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numeric_grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn`` in every coordinate of every parameter."""
    if h <= 0:
        raise ValueError("step h must be positive")
    out = []
    for p in params:
        base = p.data
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            p.data = plus
            f_plus = float(loss_fn().data)
            p.data = minus
            f_minus = float(loss_fn().data)
            g[i] = (f_plus - f_minus) / (2.0 * h)
        p.data = base
        out.append(g)
    return out


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    For each parameter the error is ``max|a - b| / max(max|a|, max|b|, floor)``,
    so coordinates with near-zero gradient are judged against the block scale
    rather than against finite-difference roundoff.
    """
    analytic = grad(loss_fn, params)
    numeric = numeric_grad(loss_fn, params, h)
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
        worst = max(worst, float(np.max(np.abs(a - b))) / denom)
    return worst
