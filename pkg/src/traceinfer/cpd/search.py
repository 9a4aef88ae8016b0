"""Search methods for penalized segmentation.

All methods minimise (exactly or greedily) the objective

    sum of segment costs + penalty * (number of change points)

and return a :class:`Segmentation` whose ``breakpoints`` are segment end
indices, the last one being the signal length.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .costs import Cost, make_cost

DEFAULT_JUMP = {"pelt": 1, "binseg": 1, "bottom_up": 2, "window": 1}
DEFAULT_WINDOW_WIDTH = 100
DEFAULT_PENALTIES = (100.0, 500.0, 1000.0)
BRUTE_FORCE_MAX_LEN = 30


class InfeasibleSegmentation(ValueError):
    pass


@dataclass(frozen=True)
class Segmentation:
    breakpoints: tuple[int, ...]
    penalty: float
    total_cost: float

    @property
    def change_points(self) -> list[int]:
        return list(self.breakpoints[:-1])

    @property
    def n_changes(self) -> int:
        return len(self.breakpoints) - 1


def penalized_cost(cost: Cost, breakpoints, penalty: float) -> float:
    total = 0.0
    start = 0
    for b in breakpoints:
        total += cost.error(start, b)
        start = b
    return total + penalty * (len(breakpoints) - 1)


def _segmentation(cost, bkps, penalty):
    bkps = tuple(int(b) for b in bkps)
    return Segmentation(bkps, float(penalty), penalized_cost(cost, bkps, penalty))


def _check(n, min_size, penalty):
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    if n < 2 * min_size:
        raise InfeasibleSegmentation(f"signal of length {n} is shorter than 2 * min_size ({min_size})")


def pelt(cost: Cost, penalty: float, min_size: int, jump: int = 1) -> Segmentation:
    """Optimal partitioning with pruning of candidates that can never win."""
    n = cost.n_samples
    ends = [t for t in range(jump, n, jump)] + [n]
    best = {0: 0.0}
    last = {0: None}
    candidates = [0]
    for t in ends:
        scored = [(best[s] + cost.error(s, t) + penalty, s) for s in candidates if t - s >= min_size]
        if not scored:
            # no admissible segmentation ends at t, so t cannot start one
            continue
        f_t, s_t = min(scored)
        best[t] = f_t
        last[t] = s_t
        # K = 0 pruning; candidates too close to t to be scored are kept
        keep = [s for s in candidates if t - s < min_size or best[s] + cost.error(s, t) <= f_t]
        candidates = keep + [t]
    if n not in best:
        raise InfeasibleSegmentation("no admissible segmentation on the jump grid")
    bkps = []
    t = n
    while t:
        bkps.append(t)
        t = last[t]
    return _segmentation(cost, sorted(bkps), penalty)


def binseg(cost: Cost, penalty: float, min_size: int, jump: int = 1) -> Segmentation:
    """Recursive binary splitting while the best split gain exceeds the penalty."""
    n = cost.n_samples
    bkps = [n]
    stack = [(0, n)]
    while stack:
        a, b = stack.pop()
        if b - a < 2 * min_size:
            continue
        whole = cost.error(a, b)
        best_gain, best_t = -math.inf, None
        first = a + min_size
        first += (-first) % jump
        for t in range(first, b - min_size + 1, jump):
            gain = whole - cost.error(a, t) - cost.error(t, b)
            if gain > best_gain:
                best_gain, best_t = gain, t
        if best_t is not None and best_gain > penalty:
            bkps.append(best_t)
            stack.append((a, best_t))
            stack.append((best_t, b))
    return _segmentation(cost, sorted(bkps), penalty)


def bottom_up(cost: Cost, penalty: float, min_size: int, jump: int = 2) -> Segmentation:
    """Start from a fine grid and merge the cheapest neighbours while the
    merge increases the cost by less than the penalty."""
    n = cost.n_samples
    step = jump * math.ceil(min_size / jump)
    bounds = list(range(0, n, step))
    if len(bounds) > 1 and n - bounds[-1] < min_size:
        bounds.pop()
    bounds.append(n)
    # doubly linked list over segment starts
    k = len(bounds) - 1
    start = bounds[:-1]
    end = bounds[1:]
    seg_cost = [cost.error(start[i], end[i]) for i in range(k)]
    nxt = list(range(1, k)) + [None]
    prv = [None] + list(range(0, k - 1))
    alive = [True] * k
    version = [0] * k
    heap = []

    def push(i):
        j = nxt[i]
        if j is None:
            return
        merged = cost.error(start[i], end[j])
        gain = merged - seg_cost[i] - seg_cost[j]
        heapq.heappush(heap, (gain, start[i], i, version[i], version[j], merged))

    for i in range(k - 1):
        push(i)
    while heap:
        gain, _, i, vi, vj, merged = heapq.heappop(heap)
        j = nxt[i]
        if not alive[i] or j is None or version[i] != vi or version[j] != vj:
            continue
        if gain >= penalty:
            break
        # merge j into i
        end[i] = end[j]
        seg_cost[i] = merged
        alive[j] = False
        nxt[i] = nxt[j]
        if nxt[j] is not None:
            prv[nxt[j]] = i
        version[i] += 1
        push(i)
        if prv[i] is not None:
            push(prv[i])
    bkps = sorted(end[i] for i in range(k) if alive[i])
    return _segmentation(cost, bkps, penalty)


def window(cost: Cost, penalty: float, min_size: int, width: int = DEFAULT_WINDOW_WIDTH,
           jump: int = 1) -> Segmentation:
    """Sliding two-half window discrepancy; peaks above the penalty are kept
    greedily, each suppressing a half-width neighbourhood."""
    n = cost.n_samples
    half = width // 2
    if half < min_size:
        raise InfeasibleSegmentation(f"window half-width {half} below min_size {min_size}")
    if width > n:
        raise InfeasibleSegmentation(f"window width {width} too large for a signal of length {n}")
    scores = []
    for t in range(half, n - half + 1, jump):
        if t in (0, n):
            continue
        gain = cost.error(t - half, t + half) - cost.error(t - half, t) - cost.error(t, t + half)
        scores.append((-gain, t))
    scores.sort()
    chosen: list[int] = []
    for neg_gain, t in scores:
        if -neg_gain <= penalty:
            break
        if all(abs(t - s) >= half for s in chosen):
            chosen.append(t)
    return _segmentation(cost, sorted(chosen) + [n], penalty)


METHODS = ("pelt", "binseg", "bottom_up", "window")


def detect_change_points(signal, kind="l2", method="pelt", penalty=100.0, min_size=None,
                         jump=None, width=DEFAULT_WINDOW_WIDTH, **cost_params) -> Segmentation:
    """Segment ``signal`` (n_samples x n_channels) with a search method and cost."""
    cost = make_cost(kind, **cost_params)
    if not hasattr(cost, "signal"):
        cost.fit(signal)
    min_size = cost.min_size if min_size is None else max(int(min_size), cost.min_size)
    jump = DEFAULT_JUMP.get(method, 1) if jump is None else int(jump)
    _check(cost.n_samples, min_size, penalty)
    if method == "pelt":
        return pelt(cost, penalty, min_size, jump)
    if method == "binseg":
        return binseg(cost, penalty, min_size, jump)
    if method == "bottom_up":
        return bottom_up(cost, penalty, min_size, jump)
    if method == "window":
        return window(cost, penalty, min_size, width, jump)
    raise ValueError(f"unknown search method {method!r}; choose from {METHODS}")


def brute_force_segmentation(signal, kind="l2", penalty=1.0, min_size=None, **cost_params
                             ) -> Segmentation:
    """Exhaustive search over all breakpoint subsets (test oracle, length <= 30)."""
    cost = make_cost(kind, **cost_params).fit(signal)
    n = cost.n_samples
    if n > BRUTE_FORCE_MAX_LEN:
        raise ValueError(f"brute force is capped at length {BRUTE_FORCE_MAX_LEN}, got {n}")
    min_size = cost.min_size if min_size is None else max(int(min_size), cost.min_size)
    _check(n, min_size, penalty)
    table = np.full((n + 1, n + 1), np.inf)
    for a in range(n):
        for b in range(a + min_size, n + 1):
            table[a, b] = cost.error(a, b)
    # enumerate every subset of the n - 1 interior positions by doubling:
    # entry m of the arrays after step i encodes the splits among 1..i
    total = np.zeros(1)
    start = np.zeros(1, dtype=np.int8)
    count = np.zeros(1, dtype=np.int8)
    for i in range(1, n):
        total = np.concatenate([total, total + table[start, i]])
        count = np.concatenate([count, count + 1])
        start = np.concatenate([start, np.full(start.size, i, dtype=np.int8)])
    total = total + table[start, n]
    objective = total + penalty * count
    best = int(np.argmin(objective))
    bkps = [i for i in range(1, n) if (best >> (i - 1)) & 1] + [n]
    return _segmentation(cost, bkps, penalty)
