"""Adam with bias correction."""

from __future__ import annotations

import numpy as np


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``param`` with moment buffers ``m``, ``v``.

    ``t`` is the 1-based step count used for bias correction.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, names=None):
        """Update ``params[name]`` for every name in ``names`` (default: all grads)."""
        names = list(grads) if names is None else list(names)
        for name in names:
            if not np.all(np.isfinite(grads[name])):
                bad = int((~np.isfinite(grads[name])).sum())
                raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries) at step {self.t + 1}")
        self.t += 1
        for name in names:
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            adam_step(params[name], grads[name], self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)
