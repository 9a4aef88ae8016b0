"""Segment cost functions for penalized change-point detection.

Every cost is fitted once on a full ``(n_samples, n_channels)`` signal and
then answers ``error(a, b)`` for the half-open segment ``[a, b)``.  Costs
that admit it use prefix sums so a query is O(1).
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class SegmentTooShort(ValueError):
    pass


class Cost:
    name = "base"
    min_size = 1

    def fit(self, signal):
        signal = np.asarray(signal, dtype=np.float64)
        if signal.ndim == 1:
            signal = signal[:, None]
        self.signal = signal
        self.n_samples = signal.shape[0]
        self._fit(signal)
        return self

    def _fit(self, signal):
        pass

    def error(self, a: int, b: int) -> float:
        if b - a < self.min_size:
            raise SegmentTooShort(f"{self.name}: segment [{a}, {b}) shorter than {self.min_size}")
        return self._error(a, b)

    def _error(self, a, b):
        raise NotImplementedError


def _prefix(x):
    out = np.zeros((x.shape[0] + 1,) + x.shape[1:])
    np.cumsum(x, axis=0, out=out[1:])
    return out


class CostL2(Cost):
    """Sum of squared deviations from the segment mean."""

    name = "l2"

    def _fit(self, signal):
        # centring keeps the prefix sums small (less cancellation)
        x = signal - signal.mean(axis=0)
        self._s1 = _prefix(x)
        self._s2 = _prefix((x**2).sum(axis=1))

    def _error(self, a, b):
        s1 = self._s1[b] - self._s1[a]
        val = self._s2[b] - self._s2[a] - (s1 @ s1) / (b - a)
        return max(float(val), 0.0)


class CostL1(Cost):
    """Sum of absolute deviations from the per-channel segment median."""

    name = "l1"

    def _error(self, a, b):
        seg = self.signal[a:b]
        return float(np.abs(seg - np.median(seg, axis=0)).sum())


class CostLinear(Cost):
    """Residual sum of squares of a per-channel linear trend ``x_t ~ a t + b``."""

    name = "linear"
    min_size = 2

    def _fit(self, signal):
        n = signal.shape[0]
        x = signal - signal.mean(axis=0)
        t = (np.arange(n) - (n - 1) / 2.0) / max(n, 1)
        self._st = _prefix(t)
        self._stt = _prefix(t * t)
        self._sx = _prefix(x)
        self._stx = _prefix(t[:, None] * x)
        self._sxx = _prefix(x * x)

    def _error(self, a, b):
        m = b - a
        st = self._st[b] - self._st[a]
        stt = self._stt[b] - self._stt[a]
        sx = self._sx[b] - self._sx[a]
        stx = self._stx[b] - self._stx[a]
        sxx = self._sxx[b] - self._sxx[a]
        var_t = stt - st * st / m
        cov = stx - st * sx / m
        rss = sxx - sx * sx / m
        if var_t > 1e-15:
            rss = rss - cov * cov / var_t
        return max(float(rss.sum()), 0.0)


class CostAR(Cost):
    """Per-channel autoregressive fit (order ``p`` plus intercept).

    Lagged regressors come from the whole signal; steps before the start are
    filled with the first sample, which keeps the cost translation invariant.
    """

    name = "ar"

    def __init__(self, order: int = 4):
        if order < 1:
            raise ValueError("AR order must be at least 1")
        self.order = order
        self.min_size = order + 1

    def _fit(self, signal):
        p = self.order
        n, d = signal.shape
        x = signal - signal.mean(axis=0)
        padded = np.concatenate([np.repeat(x[:1], p, axis=0), x])
        # design per channel: [lag1..lagp, 1, target]
        cols = [padded[p - k : p - k + n] for k in range(1, p + 1)]
        z = np.stack(cols + [np.ones_like(x), x], axis=2)  # (n, d, p+2)
        self._zz = _prefix(z[:, :, :, None] * z[:, :, None, :])  # (n+1, d, p+2, p+2)

    def _error(self, a, b):
        g = self._zz[b] - self._zz[a]
        total = 0.0
        k = self.order + 1
        for c in range(g.shape[0]):
            xtx = g[c, :k, :k]
            xty = g[c, :k, k]
            yty = g[c, k, k]
            beta = np.linalg.lstsq(xtx, xty, rcond=None)[0]
            total += max(yty - xty @ beta, 0.0)
        return float(total)


class CostGaussian(Cost):
    """Gaussian likelihood cost ``(b - a) log det(cov + 1e-6 I)``."""

    name = "gaussian"

    def _fit(self, signal):
        x = signal - signal.mean(axis=0)
        self._s1 = _prefix(x)
        self._s2 = _prefix(x[:, :, None] * x[:, None, :])

    def _error(self, a, b):
        m = b - a
        mean = (self._s1[b] - self._s1[a]) / m
        cov = (self._s2[b] - self._s2[a]) / m - np.outer(mean, mean)
        cov += 1e-6 * np.eye(cov.shape[0])
        _, logdet = np.linalg.slogdet(cov)
        return float(m * logdet)


class CostRank(Cost):
    """Rank-based cost on centred full-signal ranks: ``-(b - a) r^T S^-1 r``."""

    name = "rank"

    def _fit(self, signal):
        n = signal.shape[0]
        ranks = np.column_stack([rankdata(signal[:, c]) for c in range(signal.shape[1])])
        ranks -= (n + 1) / 2.0
        cov = np.atleast_2d(np.cov(ranks, rowvar=False, bias=True))
        self._inv = np.linalg.pinv(cov)
        self._s1 = _prefix(ranks)

    def _error(self, a, b):
        m = b - a
        r = (self._s1[b] - self._s1[a]) / m
        return float(-m * (r @ self._inv @ r))


def median_bandwidth(signal, max_points: int = 512) -> float:
    """Inverse median pairwise squared distance on a strided subsample."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] > max_points:
        x = x[np.linspace(0, x.shape[0] - 1, max_points).astype(int)]
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    med = np.median(sq[np.triu_indices(x.shape[0], k=1)]) if x.shape[0] > 1 else 0.0
    return 1.0 / med if med > 0 else 1.0


class CostKernel(Cost):
    """Kernelized mean change with an RBF kernel ``exp(-gamma ||x - y||^2)``.

    The Gram matrix is summarised by a 2-D prefix sum; memory is O(n^2).
    """

    name = "kernel"

    def __init__(self, gamma: float | None = None):
        if gamma is not None and gamma <= 0:
            raise ValueError("kernel bandwidth must be positive")
        self.gamma = gamma

    def _fit(self, signal):
        gamma = self.gamma if self.gamma is not None else median_bandwidth(signal)
        self.gamma_ = gamma
        sq = (signal**2).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * signal @ signal.T, 0.0)
        gram = np.exp(-gamma * d2)
        n = signal.shape[0]
        self._cum = np.zeros((n + 1, n + 1))
        np.cumsum(np.cumsum(gram, axis=0), axis=1, out=self._cum[1:, 1:])

    def _error(self, a, b):
        c = self._cum
        block = c[b, b] - c[a, b] - c[b, a] + c[a, a]
        m = b - a
        return max(float(m - block / m), 0.0)


COSTS = {
    "l1": CostL1,
    "l2": CostL2,
    "linear": CostLinear,
    "ar": CostAR,
    "gaussian": CostGaussian,
    "rank": CostRank,
    "kernel": CostKernel,
}


def make_cost(kind, **params) -> Cost:
    if isinstance(kind, Cost):
        return kind
    try:
        return COSTS[kind.lower()](**params)
    except KeyError:
        raise ValueError(f"unknown cost {kind!r}; choose from {sorted(COSTS)}") from None


def segment_cost(signal, a: int, b: int, kind="l2", **params) -> float:
    """Cost of rows ``a..b`` (half-open) of ``signal`` under ``kind``."""
    return make_cost(kind, **params).fit(signal).error(a, b)
