"""Training, fine-tuning and inference.

Datasets handed to :func:`train` and :func:`fine_tune` must already be
normalized; the stats used are passed along only to be stored in the
checkpoint.  :func:`predict_states` and :func:`predict_dataset` take raw
traces and normalize them with the checkpoint's stats.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..metrics import DEFAULT_TAUS_SECONDS, evaluate_predictions
from ..seeding import substream
from ..trace import ChannelStats, Dataset, LabelSequence, MultivariateTrace, normalize_channels
from .checkpoint import CheckpointError, ModelCheckpoint
from .loss import dice_loss, one_hot
from .model import Model
from .optim import Adam

logger = logging.getLogger(__name__)

DEFAULT_FINE_TUNE_LAYERS = ("dense_hidden", "dense_out")
MONITORS = ("class_f1", "loss")


class SelectorError(ValueError):
    pass


def _arrays(dataset: Dataset):
    xs = [tr.samples for tr, _ in dataset.traces]
    ys = [seq.labels for seq in dataset.label_sequences()]
    return xs, ys


def pad_batch(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray] | None, pad_id: int, dtype):
    """Stack variable-length sequences, zero-padded to the longest one.

    Returns ``(x, labels, mask)``; ``labels`` is None when ``ys`` is.
    """
    length = max(x.shape[0] for x in xs)
    feat = xs[0].shape[1]
    x = np.zeros((len(xs), length, feat), dtype=dtype)
    mask = np.zeros((len(xs), length), dtype=bool)
    labels = None if ys is None else np.full((len(xs), length), pad_id, dtype=np.int64)
    for i, seq in enumerate(xs):
        n = seq.shape[0]
        x[i, :n] = seq
        mask[i, :n] = True
        if ys is not None:
            labels[i, :n] = ys[i]
    return x, labels, mask


def _length_batches(lengths, batch_size):
    # inference batches of similar lengths keep padding small
    order = np.argsort(lengths, kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def predict_probabilities(model: Model, xs: Sequence[np.ndarray], batch_size: int | None = None,
                          start: int = 0) -> list[np.ndarray]:
    """Per-sequence class probabilities ``(l_T, N_s)`` for already-normalized inputs."""
    batch_size = batch_size or model.config.batch_size
    out: list[np.ndarray | None] = [None] * len(xs)
    for idx in _length_batches([x.shape[0] for x in xs], batch_size):
        x, _, mask = pad_batch([xs[i] for i in idx], None, 0, model.dtype)
        probs = model.forward(x, mask, start=start)
        for j, i in enumerate(idx):
            out[i] = probs[j, : xs[i].shape[0]]
    return out


def probabilities_to_states(probs: np.ndarray) -> np.ndarray:
    """Per-step argmax; ties go to the lowest class id."""
    return np.argmax(probs, axis=-1).astype(np.int64)


def _predict_labels(model: Model, xs, start: int = 0) -> list[LabelSequence]:
    return [LabelSequence(probabilities_to_states(p)) for p in predict_probabilities(model, xs, start=start)]


def _model_and_stats(source):
    if isinstance(source, ModelCheckpoint):
        return source.to_model(), source.stats, source
    return source, None, None


def predict_states(source: Model | ModelCheckpoint, trace: MultivariateTrace | np.ndarray,
                   mask=None, stats: ChannelStats | None = None) -> LabelSequence:
    """State labels for one trace.

    With a checkpoint the trace schema is checked and its stats applied.
    Steps outside ``mask`` (trailing padding) are excluded from the
    computation and labelled with the pad id.
    """
    model, ck_stats, ckpt = _model_and_stats(source)
    stats = stats if stats is not None else ck_stats
    if isinstance(trace, MultivariateTrace):
        if ckpt is not None:
            ckpt.check_schema(trace.schema)
        samples = trace.samples
    else:
        samples = np.asarray(trace, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != model.config.n_channels:
        raise CheckpointError(f"expected {model.config.n_channels} channels, got shape {samples.shape}")
    if stats is not None:
        samples = stats.apply(samples)
    length = samples.shape[0]
    n_valid = length if mask is None else int(np.asarray(mask, dtype=bool).sum())
    labels = np.full(length, model.config.n_states, dtype=np.int64)
    valid = np.zeros(length, dtype=bool)
    valid[:n_valid] = True
    if n_valid:
        labels[:n_valid] = _predict_labels(model, [samples[:n_valid]])[0].labels
    return LabelSequence(labels, valid)


def predict_dataset(source: Model | ModelCheckpoint, dataset: Dataset,
                    stats: ChannelStats | None = None) -> list[LabelSequence]:
    """Labels for every trace of a raw (un-normalized) dataset."""
    model, ck_stats, ckpt = _model_and_stats(source)
    stats = stats if stats is not None else ck_stats
    if ckpt is not None:
        ckpt.check_schema(dataset.schema)
    xs = [tr.samples if stats is None else stats.apply(tr.samples) for tr, _ in dataset.traces]
    return _predict_labels(model, xs)


# -- training loop ----------------------------------------------------------------


def _trainable_start(model: Model, trainable: Iterable[str] | None) -> tuple[int, list[str]]:
    names = model.layer_names()
    if trainable is None:
        return 0, list(model.params)
    trainable = list(trainable)
    selected = [i for i, n in enumerate(names) if any(n == s or n.startswith(s) for s in trainable)]
    if not selected:
        raise SelectorError(f"selector {trainable} matches no layer of {names}")
    chosen = {names[i] for i in selected}
    params = [p for p in model.params if p.split(".")[0] in chosen]
    return min(selected), params


def _validation_row(model, val_xs, val_ys, n_states, sample_period, taus, start):
    probs = predict_probabilities(model, val_xs, start=start)
    preds = [LabelSequence(probabilities_to_states(p)) for p in probs]
    truths = [LabelSequence(y) for y in val_ys]
    row = evaluate_predictions(truths, preds, n_states, sample_period, taus)
    losses = []
    for p, y in zip(probs, val_ys):
        truth = one_hot(y, n_states, dtype=p.dtype)[None]
        losses.append(dice_loss(p[None], truth, np.ones((1, len(y)), dtype=bool))[0])
    row["val_loss"] = float(np.mean(losses))
    return row


def _write_history(path: Path, history: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(history[0]) if history else ["epoch"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(model: Model, train_set: Dataset, val_set: Dataset, *, stats: ChannelStats | None = None,
          max_epochs: int | None = None, patience: int | None = None,
          trainable: Iterable[str] | None = None, monitor: str = "class_f1",
          taus_seconds=DEFAULT_TAUS_SECONDS, metrics_csv: Path | str | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> ModelCheckpoint:
    """Minimise the dice loss with Adam and early stopping.

    Each epoch visits the training traces in a seeded random order, in
    batches padded to the batch maximum.  After every epoch the validation
    split is scored; training stops once ``monitor`` has not improved for
    ``patience`` epochs and the best weights are kept.  ``trainable``
    restricts updates to the named layers (all layers by default); frozen
    layers are left bit-for-bit untouched.

    Raises
    ------
    FloatingPointError
        On a non-finite loss or gradient; the message names the batch.
    """
    cfg = model.config
    if monitor not in MONITORS:
        raise ValueError(f"monitor must be one of {MONITORS}")
    if train_set.Z == 0 or val_set.Z == 0:
        raise ValueError("training and validation splits must be non-empty")
    if set(train_set.names) & set(val_set.names):
        raise ValueError("training and validation splits overlap")
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    patience = cfg.patience if patience is None else patience
    start, names = _trainable_start(model, trainable)
    pad_id = cfg.n_states
    period = train_set.sample_period

    xs, ys = _arrays(train_set)
    val_xs, val_ys = _arrays(val_set)
    if start > 0:
        # frozen prefix: its outputs never change, so compute them once
        xs = predict_features(model, xs, start)
        val_xs = predict_features(model, val_xs, start)

    optimizer = Adam(lr=cfg.learning_rate)
    rng = substream(cfg.seed, "batch_order")
    params = model.params
    history: list[dict] = []
    best_score, best_epoch, best_params = -math.inf, 0, {k: v.copy() for k, v in params.items()}
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(xs))
        losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x, labels, mask = pad_batch([xs[i] for i in idx], [ys[i] for i in idx], pad_id, model.dtype)
            loss, grads = model.loss_and_gradients(x, labels, mask, start=start)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}, batch {b} (traces {idx.tolist()})")
            try:
                optimizer.step(params, grads, names)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b}: {exc}") from None
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        row.update(_validation_row(model, val_xs, val_ys, cfg.n_states, period, taus_seconds, start))
        history.append(row)
        logger.info("epoch %d: loss %.4f, val class F1 %.4f", epoch, row["train_loss"], row["class_f1"])
        if on_epoch is not None:
            on_epoch(row)
        score = row["class_f1"] if monitor == "class_f1" else -row["val_loss"]
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    model.set_params(best_params)
    if metrics_csv is not None:
        _write_history(Path(metrics_csv), history)
    return ModelCheckpoint.from_model(
        model, stats=stats, schema=train_set.schema, states=train_set.catalog.states, history=history
    )


def predict_features(model: Model, xs: Sequence[np.ndarray], stop: int) -> list[np.ndarray]:
    """Outputs of layers ``0:stop`` per sequence (no padding involved)."""
    return [model.forward(x[None], stop=stop)[0] for x in xs]


def fine_tune(checkpoint: ModelCheckpoint, train_set: Dataset, val_set: Dataset,
              selector: Iterable[str] | None = DEFAULT_FINE_TUNE_LAYERS, *,
              max_epochs: int = 50, patience: int | None = None,
              learning_rate: float | None = None, normalized: bool = False,
              monitor: str = "class_f1") -> ModelCheckpoint:
    """Retrain the selected layers of a checkpoint on a small dataset.

    ``selector`` lists layer names or name prefixes; the default picks the
    two final dense layers.  An empty selector freezes everything and
    returns an identical copy.  Unless ``normalized`` is set the datasets
    are raw and are normalized with the checkpoint's stats.

    Raises
    ------
    SelectorError
        If a non-empty selector matches no layer.
    """
    if checkpoint.schema:
        checkpoint.check_schema(train_set.schema)
    selector = list(selector) if selector is not None else list(DEFAULT_FINE_TUNE_LAYERS)
    model = checkpoint.to_model()
    if not selector:
        return ModelCheckpoint.from_model(model, stats=checkpoint.stats, schema=checkpoint.schema,
                                          states=checkpoint.states, history=list(checkpoint.history))
    _trainable_start(model, selector)  # fail early on a bad selector
    if not normalized and checkpoint.stats is not None:
        train_set, _ = normalize_channels(train_set, checkpoint.stats)
        val_set, _ = normalize_channels(val_set, checkpoint.stats)
    if learning_rate is not None:
        model.config = replace(model.config, learning_rate=learning_rate)
    tuned = train(model, train_set, val_set, stats=checkpoint.stats, max_epochs=max_epochs,
                  patience=max_epochs if patience is None else patience, trainable=selector,
                  monitor=monitor)
    tuned.history = list(checkpoint.history) + [dict(r, stage="fine_tune") for r in tuned.history]
    return tuned
