"""Scoring of predicted state sequences.

Change points are scored with a tolerance margin: a predicted change is a
true positive when some true change lies strictly closer than ``tau``
steps, a false positive otherwise, and a true change with no predicted
change within ``tau`` is a false negative.  There is no one-to-one matching
in these counts (see :func:`cpd_score_matched` for a matched variant).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .trace import ChangePointAnnotation, Dataset, LabelSequence, TraceError, extract_change_points

logger = logging.getLogger(__name__)

DEFAULT_TAUS_SECONDS = (1.0, 3.0, 5.0)


def tau_steps(tau_seconds: float, sample_period: float = 0.2) -> int:
    if tau_seconds <= 0:
        raise ValueError("tolerance margin must be positive")
    return int(round(tau_seconds / sample_period))


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass(frozen=True)
class ScoreReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def as_dict(self, prefix=""):
        return {
            f"{prefix}tp": self.tp,
            f"{prefix}fp": self.fp,
            f"{prefix}fn": self.fn,
            f"{prefix}precision": self.precision,
            f"{prefix}recall": self.recall,
            f"{prefix}f1": self.f1,
        }


def _change_times(cp) -> np.ndarray:
    if isinstance(cp, ChangePointAnnotation):
        return np.asarray(cp.change_times, dtype=np.int64)
    return np.asarray(sorted(cp), dtype=np.int64)


def cpd_score(cp_true, cp_pred, tau: int) -> ScoreReport:
    """Tolerance-margin confusion counts.

    ``cp_true`` / ``cp_pred`` are annotations (their t = 0 entries are not
    changes and are ignored) or plain collections of change times.  ``tau``
    is in samples; a match requires ``|t - t_hat| < tau``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    true_t = _change_times(cp_true)
    pred_t = _change_times(cp_pred)
    if true_t.size == 0 or pred_t.size == 0:
        return ScoreReport(0, int(pred_t.size), int(true_t.size))
    close = np.abs(true_t[:, None] - pred_t[None, :]) < tau
    tp = int(close.any(axis=0).sum())
    fp = int(pred_t.size - tp)
    fn = int((~close.any(axis=1)).sum())
    return ScoreReport(tp, fp, fn)


def cpd_score_matched(cp_true, cp_pred, tau: int) -> ScoreReport:
    """Diagnostic variant with greedy one-to-one matching (closest pairs first)."""
    true_t = _change_times(cp_true)
    pred_t = _change_times(cp_pred)
    pairs = sorted(
        (abs(int(t) - int(p)), i, j)
        for i, t in enumerate(true_t)
        for j, p in enumerate(pred_t)
        if abs(int(t) - int(p)) < tau
    )
    used_t, used_p = set(), set()
    for _, i, j in pairs:
        if i not in used_t and j not in used_p:
            used_t.add(i)
            used_p.add(j)
    tp = len(used_p)
    return ScoreReport(tp, int(pred_t.size) - tp, int(true_t.size) - tp)


@dataclass(frozen=True)
class ClassificationReport:
    per_class: dict[int, ScoreReport]
    precision: float
    recall: float
    f1: float
    accuracy: float

    def as_dict(self, prefix="class_"):
        return {f"{prefix}precision": self.precision, f"{prefix}recall": self.recall,
                f"{prefix}f1": self.f1}


def _valid_pairs(truth, pred, mask):
    truth = np.asarray(truth.labels if isinstance(truth, LabelSequence) else truth)
    pred = np.asarray(pred.labels if isinstance(pred, LabelSequence) else pred)
    if truth.shape != pred.shape:
        raise TraceError(f"length mismatch: {truth.shape} vs {pred.shape}")
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return truth[mask], pred[mask]


def _is_sequence_list(x) -> bool:
    return isinstance(x, (list, tuple)) and bool(x) and (
        isinstance(x[0], LabelSequence) or np.ndim(x[0]) > 0)


def classification_report(truth, pred, n_states: int | None = None, mask=None
                          ) -> ClassificationReport:
    """Per-class one-vs-rest counts over time steps and macro means.

    The macro average runs over classes present in ``truth``.  ``truth`` and
    ``pred`` may be lists of sequences, in which case steps are pooled.
    """
    if _is_sequence_list(truth):
        masks = mask if mask is not None else [None] * len(truth)
        pairs = [_valid_pairs(t, p, m) for t, p, m in zip(truth, pred, masks)]
        o = np.concatenate([a for a, _ in pairs]) if pairs else np.zeros(0, dtype=np.int64)
        o_hat = np.concatenate([b for _, b in pairs]) if pairs else np.zeros(0, dtype=np.int64)
    else:
        o, o_hat = _valid_pairs(truth, pred, mask)
    if n_states is None:
        n_states = int(max(o.max(initial=-1), o_hat.max(initial=-1))) + 1
    per_class = {}
    for c in range(n_states):
        t_c = o == c
        p_c = o_hat == c
        per_class[c] = ScoreReport(int((t_c & p_c).sum()), int((~t_c & p_c).sum()), int((t_c & ~p_c).sum()))
    present = [c for c in range(n_states) if per_class[c].tp + per_class[c].fn > 0]
    def macro(attr):
        return float(np.mean([getattr(per_class[c], attr) for c in present])) if present else 0.0
    acc = float((o == o_hat).mean()) if o.size else 0.0
    return ClassificationReport(per_class, macro("precision"), macro("recall"), macro("f1"), acc)


def evaluate_predictions(truths: Sequence[LabelSequence], preds: Sequence[LabelSequence],
                         n_states: int, sample_period: float = 0.2,
                         taus_seconds: Iterable[float] = DEFAULT_TAUS_SECONDS) -> dict:
    """The 12-number summary: CPD P/R/F1 per tau (pooled counts) + macro P/R/F1."""
    row = {}
    for tau_s in taus_seconds:
        total = ScoreReport(0, 0, 0)
        for truth, pred in zip(truths, preds):
            total = total + cpd_score(extract_change_points(truth), extract_change_points(pred),
                                      tau_steps(tau_s, sample_period))
        row.update({f"cpd_{k}_tau{tau_s:g}s": v for k, v in total.as_dict().items()
                    if k in ("precision", "recall", "f1")})
    rep = classification_report(list(truths), list(preds), n_states,
                                mask=[t.mask & p.mask for t, p in zip(truths, preds)])
    row.update(rep.as_dict())
    return row


def spearman_matrix(dataset: Dataset) -> np.ndarray:
    """Spearman rank correlation between channels over all samples.

    Constant channels get zero correlation with everything but themselves.
    """
    x = np.concatenate([tr.samples for tr, _ in dataset.traces], axis=0)
    n = x.shape[1]
    ranks = np.column_stack([rankdata(x[:, c]) for c in range(n)])
    ranks -= ranks.mean(axis=0)
    norms = np.sqrt((ranks**2).sum(axis=0))
    constant = norms == 0
    if constant.any():
        names = [dataset.schema[i].name for i in np.flatnonzero(constant)]
        warnings.warn(f"constant channels {names}: correlation set to 0", RuntimeWarning, stacklevel=2)
    safe = np.where(constant, 1.0, norms)
    corr = (ranks.T @ ranks) / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
