"""Sliding-window classical classifiers for per-step state labelling.

A window of ``w`` consecutive steps is flattened into one feature vector
(channels contiguous within a step, steps from oldest to newest) and
labelled with the state at its last step.  Two classifiers consume these
vectors: one-vs-all ridge regression with a cross-validated penalty and a
CART decision tree.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .seeding import substream
from .trace import Dataset, LabelSequence

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(10.0 ** np.arange(-6, 7))
DEFAULT_WINDOWS = (3, 5, 10, 15, 20)
MAX_FEATURES = ("all", "sqrt", "log2")


class BaselineError(ValueError):
    pass


# -- windowing --------------------------------------------------------------------


@dataclass(frozen=True)
class WindowedSamples:
    """``features`` is ``(m, n * w)``; ``labels`` holds the last-step states."""

    features: np.ndarray
    labels: np.ndarray
    w: int

    def __len__(self):
        return self.labels.shape[0]


def window_features(samples: np.ndarray, labels: np.ndarray | LabelSequence | None, w: int,
                    mask=None) -> WindowedSamples:
    """All ``l_T - w + 1`` stride-1 windows of the unmasked prefix."""
    samples = np.asarray(samples, dtype=np.float64)
    if isinstance(labels, LabelSequence):
        mask = labels.mask if mask is None else mask
        labels = labels.labels
    n_valid = samples.shape[0] if mask is None else int(np.asarray(mask, dtype=bool).sum())
    if w < 1:
        raise BaselineError("window width must be at least 1")
    if w > n_valid:
        raise BaselineError(f"window width {w} exceeds the trace length {n_valid}")
    view = np.lib.stride_tricks.sliding_window_view(samples[:n_valid], w, axis=0)  # (m, n, w)
    feats = np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(n_valid - w + 1, -1)
    y = np.zeros(n_valid - w + 1, dtype=np.int64) if labels is None else np.asarray(labels)[w - 1 : n_valid]
    return WindowedSamples(feats, y.astype(np.int64), w)


def dataset_windows(dataset: Dataset, w: int) -> WindowedSamples:
    parts = [window_features(tr.samples, seq, w)
             for (tr, _), seq in zip(dataset.traces, dataset.label_sequences())]
    return WindowedSamples(np.concatenate([p.features for p in parts]),
                           np.concatenate([p.labels for p in parts]), w)


def windows_to_sequence(window_pred: np.ndarray, length: int, w: int) -> LabelSequence:
    """Per-step labels from window predictions; the first ``w - 1`` steps,
    which no window ends on, take the first window's label."""
    labels = np.empty(length, dtype=np.int64)
    labels[w - 1 :] = window_pred
    labels[: w - 1] = window_pred[0]
    return LabelSequence(labels)


# -- ridge ------------------------------------------------------------------------


def ridge_solve(x: np.ndarray, y: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge with an unpenalized intercept.

    Minimises ``||y - x W - 1 b||^2 + alpha ||W||^2``; returns ``(W, b)``.
    """
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    gram = xc.T @ xc
    gram[np.diag_indices_from(gram)] += alpha
    coef = np.linalg.solve(gram, xc.T @ (y - y_mean))
    return coef, y_mean - x_mean @ coef


def _one_hot(y, n_classes):
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _contiguous_folds(m, k):
    edges = np.linspace(0, m, k + 1).astype(int)
    return [(edges[i], edges[i + 1]) for i in range(k)]


@dataclass
class RidgeClassifier:
    """One-vs-all ridge regression on 0/1 class indicators."""

    alphas: Sequence[float] = DEFAULT_ALPHAS
    n_folds: int = 5
    coef_: np.ndarray | None = None
    intercept_: np.ndarray | None = None
    alpha_: float | None = None
    cv_scores_: dict | None = None

    def fit(self, x: np.ndarray, y: np.ndarray, n_classes: int | None = None) -> "RidgeClassifier":
        """Pick alpha by k-fold accuracy (contiguous folds, first best wins), then refit on all."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        m = x.shape[0]
        if m < self.n_folds:
            raise BaselineError(f"{m} samples cannot be split into {self.n_folds} folds")
        n_classes = int(y.max()) + 1 if n_classes is None else n_classes
        targets = _one_hot(y, n_classes)
        alphas = [float(a) for a in self.alphas]
        correct = np.zeros(len(alphas))
        if len(alphas) > 1:
            for lo, hi in _contiguous_folds(m, self.n_folds):
                train = np.r_[0:lo, hi:m]
                xt, yt = x[train], targets[train]
                x_mean, y_mean = xt.mean(axis=0), yt.mean(axis=0)
                xc = xt - x_mean
                # one eigendecomposition serves every alpha
                evals, evecs = np.linalg.eigh(xc.T @ xc)
                proj = evecs.T @ (xc.T @ (yt - y_mean))
                xv = (x[lo:hi] - x_mean) @ evecs
                for i, a in enumerate(alphas):
                    scores = xv @ (proj / (evals + a)[:, None]) + y_mean
                    correct[i] += (np.argmax(scores, axis=1) == y[lo:hi]).sum()
        self.cv_scores_ = {a: c / m for a, c in zip(alphas, correct)}
        self.alpha_ = alphas[int(np.argmax(correct))]
        self.coef_, self.intercept_ = ridge_solve(x, targets, self.alpha_)
        return self

    def decision_function(self, x):
        return np.asarray(x, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, x) -> np.ndarray:
        """Argmax of class scores; ties go to the lowest class id."""
        return np.argmax(self.decision_function(x), axis=1).astype(np.int64)


# -- CART -------------------------------------------------------------------------


@numba.njit(cache=True)
def _best_split(x, y, order, lo, hi, features, n_classes):
    # returns (feature, threshold, score); score = sum cL^2/nL + sum cR^2/nR,
    # larger is purer; feature -1 when no split separates distinct values
    n = hi - lo
    total = np.zeros(n_classes, np.int64)
    for i in range(lo, hi):
        total[y[order[0, i]]] += 1
    best_f = -1
    best_thr = 0.0
    best_score = -1.0
    left = np.zeros(n_classes, np.int64)
    for f in features:
        left[:] = 0
        sq_left = 0.0
        sq_right = 0.0
        for c in range(n_classes):
            sq_right += total[c] * total[c]
        for i in range(lo, hi - 1):
            idx = order[f, i]
            c = y[idx]
            sq_left += 2 * left[c] + 1
            sq_right -= 2 * (total[c] - left[c]) - 1
            left[c] += 1
            v = x[idx, f]
            v_next = x[order[f, i + 1], f]
            if v_next <= v:
                continue
            n_left = i - lo + 1
            score = sq_left / n_left + sq_right / (n - n_left)
            if score > best_score:
                best_score = score
                best_f = f
                best_thr = v + (v_next - v) / 2.0
    return best_f, best_thr, best_score


@numba.njit(cache=True)
def _partition(x, order, lo, hi, feature, threshold, buf):
    # stable partition of every feature's segment into <= threshold / > threshold
    n_left = 0
    for f in range(order.shape[0]):
        k = lo
        r = 0
        for i in range(lo, hi):
            idx = order[f, i]
            if x[idx, feature] <= threshold:
                order[f, k] = idx
                k += 1
            else:
                buf[r] = idx
                r += 1
        for j in range(r):
            order[f, k + j] = buf[j]
        n_left = k - lo
    return n_left


@numba.njit(cache=True)
def _tree_apply(x, feature, threshold, left, right):
    out = np.empty(x.shape[0], np.int64)
    for i in range(x.shape[0]):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


def _feature_cap(max_features: str | int | None, d: int) -> int:
    if max_features in (None, "all"):
        return d
    if max_features == "sqrt":
        return max(1, int(math.sqrt(d)))
    if max_features == "log2":
        return max(1, int(math.log2(d)))
    if isinstance(max_features, int) and max_features >= 1:
        return min(max_features, d)
    raise BaselineError(f"max_features must be one of {MAX_FEATURES} or a positive int")


@dataclass
class DecisionTree:
    """CART with Gini impurity and midpoint thresholds.

    With a feature cap, each node draws its candidate features from a
    generator seeded by ``seed``; nodes are expanded depth first, so the
    draws and hence the tree are reproducible.  Leaves predict their
    majority class (lowest id on ties).
    """

    max_depth: int | None = None
    max_features: str | int | None = "all"
    seed: int = 0

    def fit(self, x: np.ndarray, y: np.ndarray, n_classes: int | None = None) -> "DecisionTree":
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        m, d = x.shape
        if m == 0:
            raise BaselineError("cannot fit a tree on an empty sample set")
        if self.max_depth is not None and self.max_depth < 0:
            raise BaselineError("max_depth must be non-negative")
        n_classes = int(y.max()) + 1 if n_classes is None else n_classes
        cap = _feature_cap(self.max_features, d)
        rng = substream(self.seed, "cart")
        order = np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T)
        buf = np.empty(m, dtype=order.dtype)
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(lo, hi):
            counts = np.bincount(y[order[0, lo:hi]], minlength=n_classes)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(int(np.argmax(counts)))
            return len(feature) - 1, counts

        root, counts = new_node(0, m)
        stack = [(root, 0, m, 0, counts)]
        while stack:
            node, lo, hi, depth, counts = stack.pop()
            if hi - lo < 2 or (counts > 0).sum() < 2:
                continue
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            feats = np.arange(d) if cap == d else np.sort(rng.choice(d, cap, replace=False))
            f, thr, score = _best_split(x, y, order, lo, hi, feats.astype(np.int64), n_classes)
            parent = float((counts.astype(np.float64) ** 2).sum() / (hi - lo))
            if f < 0 or score <= parent * (1.0 + 1e-12):
                continue
            n_left = _partition(x, order, lo, hi, f, thr, buf)
            feature[node], threshold[node] = int(f), float(thr)
            l_node, l_counts = new_node(lo, lo + n_left)
            r_node, r_counts = new_node(lo + n_left, hi)
            left[node], right[node] = l_node, r_node
            # right pushed first so the left subtree is expanded first
            stack.append((r_node, lo + n_left, hi, depth + 1, r_counts))
            stack.append((l_node, lo, lo + n_left, depth + 1, l_counts))
        self.feature_ = np.asarray(feature, dtype=np.int64)
        self.threshold_ = np.asarray(threshold, dtype=np.float64)
        self.left_ = np.asarray(left, dtype=np.int64)
        self.right_ = np.asarray(right, dtype=np.int64)
        self.value_ = np.asarray(value, dtype=np.int64)
        return self

    @property
    def n_nodes(self) -> int:
        return int(self.feature_.size)

    @property
    def n_splits(self) -> int:
        return int((self.feature_ >= 0).sum())

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature_[node] >= 0:
                depths[self.left_[node]] = depths[self.right_[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        leaves = _tree_apply(x, self.feature_, self.threshold_, self.left_, self.right_)
        return self.value_[leaves]


# -- dataset level ----------------------------------------------------------------


@dataclass(frozen=True)
class BaselineSpec:
    w: int
    classifier: str  # "ridge" or "cart"
    max_depth: int | None = None
    max_features: str = "all"

    def label(self) -> str:
        if self.classifier == "ridge":
            return f"ridge_w{self.w}"
        depth = "none" if self.max_depth is None else self.max_depth
        return f"cart_w{self.w}_d{depth}_{self.max_features}"


def baseline_grid(windows=DEFAULT_WINDOWS, depths=(None,), features=MAX_FEATURES,
                  ridge: bool = True, cart: bool = True) -> list[BaselineSpec]:
    specs = []
    for w in windows:
        if ridge:
            specs.append(BaselineSpec(w, "ridge"))
        if cart:
            specs += [BaselineSpec(w, "cart", d, f) for d in depths for f in features]
    return specs


def fit_baseline(spec: BaselineSpec, train: Dataset, seed: int = 0):
    data = dataset_windows(train, spec.w)
    n_classes = train.catalog.n_states
    if spec.classifier == "ridge":
        return RidgeClassifier().fit(data.features, data.labels, n_classes)
    if spec.classifier == "cart":
        return DecisionTree(spec.max_depth, spec.max_features, seed).fit(data.features, data.labels, n_classes)
    raise BaselineError(f"unknown classifier {spec.classifier!r}")


def predict_baseline(model, dataset: Dataset, w: int) -> list[LabelSequence]:
    out = []
    for tr, _ in dataset.traces:
        feats = window_features(tr.samples, None, w).features
        out.append(windows_to_sequence(model.predict(feats), tr.length, w))
    return out
