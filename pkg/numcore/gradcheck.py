from __future__ import annotations

from typing import Callable

import numpy as np

from numcore.tensor import Tensor, backward, current_graph, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(f: Callable[[], Tensor], point: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of f with respect to every entry of ``point``"""
    grad = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = f().item()
            flat[i] = saved - h
            down = f().item()
            flat[i] = saved
            out[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(f: Callable[[], Tensor], point: Tensor, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences at ``point``

    ``f`` is a closure that rebuilds the scalar loss from the current
    parameter values; ``point`` must be one of the leaves it reads.
    """
    current_graph().reset()
    was = point.requires_grad
    point.requires_grad = True
    try:
        loss = f()
        grads = backward(loss)
        analytic = grads[point].data if point in grads else np.zeros_like(point.data)
        numeric = numeric_gradient(f, point, h)
    finally:
        point.requires_grad = was
        current_graph().reset()
    if analytic.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric, floor).max())
