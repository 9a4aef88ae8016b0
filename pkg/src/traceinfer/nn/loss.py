"""Soft dice loss over classes, masked on padded steps."""

from __future__ import annotations

import numpy as np


def one_hot(labels, n_classes, dtype=np.float64):
    """One-hot rows; ids outside ``[0, n_classes)`` (padding) give zero rows."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n_classes,), dtype=dtype)
    valid = (labels >= 0) & (labels < n_classes)
    idx = np.nonzero(valid)
    out[idx + (labels[valid],)] = 1.0
    return out


def dice_loss(pred, truth, mask, eps=1.0, generalized=False):
    """Return ``(loss, d loss / d pred)``.

    Per class ``c``: ``D_c = (2 sum p g + eps) / (sum p + sum g + eps)`` with
    sums over all unmasked (batch, step) positions; the loss is
    ``1 - mean_c D_c``.  With ``generalized=True`` the classes are pooled
    with weights ``1 / max(sum g, 1)^2`` instead.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("dice loss over a fully masked batch")
    if pred.shape != truth.shape or pred.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    m = mask[..., None].astype(pred.dtype)
    pm = pred * m
    gm = truth * m
    axes = tuple(range(pred.ndim - 1))
    inter = (pm * gm).sum(axis=axes)
    p_sum = pm.sum(axis=axes)
    g_sum = gm.sum(axis=axes)
    if not generalized:
        denom = p_sum + g_sum + eps
        dice = (2.0 * inter + eps) / denom
        loss = 1.0 - dice.mean()
        grad_c = (2.0 * gm * denom - (2.0 * inter + eps) * m) / denom**2
        grad = -grad_c / pred.shape[-1]
        return float(loss), grad.astype(pred.dtype, copy=False)
    w = 1.0 / np.maximum(g_sum, 1.0) ** 2
    num = 2.0 * (w * inter).sum() + eps
    den = (w * (p_sum + g_sum)).sum() + eps
    loss = 1.0 - num / den
    grad = -(2.0 * w * gm * den - num * w * m) / den**2
    return float(loss), grad.astype(pred.dtype, copy=False)
