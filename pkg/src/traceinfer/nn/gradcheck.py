"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import Model


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, epsilon: float = 1e-4,
                     order: int = 4) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place).

    ``order=2`` is the three-point stencil, ``order=4`` the five-point one,
    whose O(h^4) truncation error allows a larger step and so less roundoff.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)

    def at(i, old, delta):
        flat[i] = old + delta
        value = f()
        flat[i] = old
        return value

    for i in range(flat.size):
        old = flat[i]
        d1 = at(i, old, epsilon) - at(i, old, -epsilon)
        if order == 2:
            g[i] = d1 / (2.0 * epsilon)
        else:
            d2 = at(i, old, 2 * epsilon) - at(i, old, -2 * epsilon)
            g[i] = (8.0 * d1 - d2) / (12.0 * epsilon)
    return grad


def kink_margin(model: Model, x, mask) -> float:
    """Smallest |pre-activation| of any leaky ReLU on a valid step.

    Finite differences are only meaningful when this exceeds a few steps
    ``epsilon``; otherwise a perturbation can cross the kink at zero.
    """
    x = np.asarray(x, dtype=model.dtype)
    mask = np.asarray(mask, dtype=bool)
    model.forward(x, mask, keep_cache=True)
    caches = model._caches[0]
    model._caches = None
    margin = np.inf
    for layer, cache in zip(model.layers, caches):
        if layer.kind == "conv":
            pre = cache[1]
        elif layer.kind == "dense" and layer.activation == "leaky_relu":
            pre = cache[2]
        else:
            continue
        margin = min(margin, float(np.abs(pre[mask]).min()))
    return margin


def gradient_check(model: Model, x, labels, mask, epsilon: float = 1e-4,
                   corrupt: Callable[[dict], None] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients
    over every parameter of ``model`` (which must be float64).

    ``corrupt`` may modify the analytic gradients before comparison; it
    exists to show that the check catches wrong gradients.
    """
    if model.dtype != np.float64:
        raise TypeError("gradient checks need a float64 model")
    x = np.asarray(x, dtype=np.float64)
    _, grads = model.loss_and_gradients(x, labels, mask)
    if corrupt is not None:
        corrupt(grads)

    def loss():
        return model.loss_and_gradients(x, labels, mask)[0]

    worst = 0.0
    for name, param in model.params.items():
        worst = max(worst, relative_error(grads[name], numeric_gradient(loss, param, epsilon)))
    return worst
