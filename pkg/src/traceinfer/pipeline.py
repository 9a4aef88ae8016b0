"""Experiment orchestration: data, training, baselines, scoring, reports.

:func:`run_experiment` executes resumable stages under one output
directory::

    dataset/            simulated flights (when the config asks for simgen)
    split.json          train/validation/test flight names and channel stats
    checkpoints/<v>/    one trained model per variant, with history.csv
    cpd_baseline.csv    penalized change-point detection grid on the test split
    ml_baseline.csv     sliding-window ridge / CART grid on the test split
    model_scores.csv    the trained variants on the test split
    timeline.csv        long-format truth vs prediction per test step
    summary.json        best baseline vs hybrid per metric
    timings.json        wall-clock seconds per stage

Every number in the CSV and summary files is a function of the config and
its seeds; wall-clock times are kept apart in ``timings.json``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import baselines
from .cpd import DEFAULT_PENALTIES, InfeasibleSegmentation, detect_change_points
from .metrics import DEFAULT_TAUS_SECONDS, ScoreReport, cpd_score, evaluate_predictions, tau_steps
from .nn import ModelCheckpoint, ModelConfig, build_model, fine_tune, predict_dataset, train
from .seeding import substream, substream_int
from .simgen import SimConfig, generate_dataset
from .trace import (
    ChannelStats,
    Dataset,
    LabelSequence,
    extract_change_points,
    load_dataset,
    normalize_channels,
    split_dataset,
)

logger = logging.getLogger(__name__)

METRIC_KEYS = tuple(
    [f"cpd_{m}_tau{t:g}s" for t in DEFAULT_TAUS_SECONDS for m in ("precision", "recall", "f1")]
    + ["class_precision", "class_recall", "class_f1"]
)
DESK_MODEL = {
    "conv_stack": [[32, 3], [32, 5], [32, 10], [32, 15], [32, 20]],
    "gru_stack": [64, 64],
    "dense_hidden": 64,
    "learning_rate": 1e-3,
    "max_epochs": 60,
    "patience": 10,
}
GRID_CAP = 64
STAGES = ("dataset", "split", "train", "cpd_baseline", "ml_baseline", "score", "summary")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# -- configuration -----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything one experiment run depends on.

    ``dataset`` is ``{"manifest": path}`` or ``{"simgen": {SimConfig fields}}``.
    ``model`` holds :class:`ModelConfig` overrides; the channel and state
    counts come from the dataset.  ``cpd_grid`` and ``ml_grid`` describe
    the baseline grids.
    """

    dataset: dict = field(default_factory=lambda: {"simgen": {"count": 120}})
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    variants: tuple[str, ...] = ("hybrid",)
    cpd_grid: dict = field(default_factory=lambda: {
        "methods": ["bottom_up", "window"],
        "costs": ["l1", "l2", "linear", "kernel"],
        "penalties": list(DEFAULT_PENALTIES),
    })
    ml_grid: dict = field(default_factory=lambda: {
        "windows": list(baselines.DEFAULT_WINDOWS),
        "classifiers": ["ridge", "cart"],
        "max_depths": [None],
        "max_features": list(baselines.MAX_FEATURES),
    })
    taus_seconds: tuple[float, ...] = DEFAULT_TAUS_SECONDS
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.variants = tuple(self.variants)
        self.taus_seconds = tuple(float(t) for t in self.taus_seconds)
        self.validate()

    def validate(self):
        if set(self.dataset) not in ({"manifest"}, {"simgen"}):
            raise ConfigError("dataset must be {'manifest': path} or {'simgen': {...}}")
        if "manifest" in self.dataset and not Path(self.dataset["manifest"]).exists():
            raise ConfigError(f"dataset manifest {self.dataset['manifest']} does not exist")
        if not self.variants:
            raise ConfigError("at least one model variant is required")
        for key in ("methods", "costs", "penalties"):
            if not self.cpd_grid.get(key):
                raise ConfigError(f"cpd_grid.{key} must be non-empty")
        for key in ("windows", "classifiers"):
            if not self.ml_grid.get(key):
                raise ConfigError(f"ml_grid.{key} must be non-empty")
        if not self.taus_seconds or min(self.taus_seconds) <= 0:
            raise ConfigError("tolerance margins must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: Path | str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self, dataset: Dataset, variant: str = "hybrid", **overrides) -> ModelConfig:
        values = {**self.model, **overrides}
        values.update(n_channels=len(dataset.schema), n_states=dataset.catalog.n_states, variant=variant)
        values.setdefault("seed", substream_int(self.seed, "model"))
        return ModelConfig.from_dict(values)


# -- report files ------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


CPD_FIELDS = ("method", "cost", "penalty", "signal_scaling") + METRIC_KEYS[:9]
ML_FIELDS = ("w", "classifier", "max_depth", "max_features", "alpha", "precision", "recall", "f1") + METRIC_KEYS[:9]
MODEL_FIELDS = ("variant", "parameters", "epochs", "best_epoch") + METRIC_KEYS
GRID_FIELDS = ("rank", "config", "is_default", "parameters") + METRIC_KEYS
TRANSFER_FIELDS = ("fold", "mode", "train_traces") + METRIC_KEYS
TIMELINE_FIELDS = ("trace", "step", "time_s", "source", "state")


# -- scoring helpers ---------------------------------------------------------------


def _score(truths: Sequence[LabelSequence], preds: Sequence[LabelSequence], n_states: int,
           period: float, taus) -> dict:
    return evaluate_predictions(truths, preds, n_states, period, taus)


def _cpd_only_score(truths, cps: Sequence[list[int]], period, taus) -> dict:
    row = {}
    for tau_s in taus:
        total = ScoreReport(0, 0, 0)
        for truth, cp in zip(truths, cps):
            total = total + cpd_score(extract_change_points(truth), cp, tau_steps(tau_s, period))
        row.update({f"cpd_{k}_tau{tau_s:g}s": getattr(total, k) for k in ("precision", "recall", "f1")})
    return row


def _cpd_cell(args):
    method, cost, penalty, signals = args
    cps = []
    for x in signals:
        try:
            cps.append(detect_change_points(x, kind=cost, method=method, penalty=penalty).change_points)
        except InfeasibleSegmentation:
            cps.append([])
    return cps


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_cpd_baselines(test: Dataset, grid: dict, taus=DEFAULT_TAUS_SECONDS, workers: int = 1) -> list[dict]:
    """Score every (method, cost, penalty) cell on the (normalized) ``test`` traces."""
    signals = [tr.samples for tr, _ in test.traces]
    truths = test.label_sequences()
    cells = list(itertools.product(grid["methods"], grid["costs"], [float(p) for p in grid["penalties"]]))
    results = _map(_cpd_cell, [(m, c, p, signals) for m, c, p in cells], workers)
    rows = []
    for (method, cost, penalty), cps in zip(cells, results):
        row = {"method": method, "cost": cost, "penalty": penalty, "signal_scaling": "zscore_train"}
        row.update(_cpd_only_score(truths, cps, test.sample_period, taus))
        rows.append(row)
    return rows


def ml_specs(grid: dict) -> list[baselines.BaselineSpec]:
    classifiers = grid["classifiers"]
    return baselines.baseline_grid(
        grid["windows"], tuple(grid.get("max_depths", [None])), tuple(grid.get("max_features", ["all"])),
        ridge="ridge" in classifiers, cart="cart" in classifiers,
    )


def _ml_cell(args):
    spec, train_set, test, seed, taus = args
    model = baselines.fit_baseline(spec, train_set, seed=substream_int(seed, f"cart/{spec.label()}"))
    preds = baselines.predict_baseline(model, test, spec.w)
    row = _score(test.label_sequences(), preds, test.catalog.n_states, test.sample_period, taus)
    return row, getattr(model, "alpha_", None)


def run_ml_baselines(train_set: Dataset, test: Dataset, grid: dict, seed: int = 0,
                     taus=DEFAULT_TAUS_SECONDS, workers: int = 1) -> list[dict]:
    specs = ml_specs(grid)
    results = _map(_ml_cell, [(s, train_set, test, seed, taus) for s in specs], workers)
    rows = []
    for spec, (score, alpha) in zip(specs, results):
        row = {"w": spec.w, "classifier": spec.classifier,
               "max_depth": None if spec.classifier == "ridge" else ("none" if spec.max_depth is None else spec.max_depth),
               "max_features": None if spec.classifier == "ridge" else spec.max_features,
               "alpha": alpha, "precision": score["class_precision"], "recall": score["class_recall"],
               "f1": score["class_f1"]}
        row.update({k: score[k] for k in METRIC_KEYS[:9]})
        rows.append(row)
    return rows


def improvement(model_value: float, baseline_value: float) -> float | None:
    """Relative gain ``model / baseline - 1``; None when the baseline scored 0."""
    if baseline_value <= 0:
        return None
    return model_value / baseline_value - 1.0


def _best(rows: list[dict], key: str, label: Callable[[dict], str]):
    if not rows:
        return None, None
    best = max(rows, key=lambda r: float(r[key]))
    return float(best[key]), label(best)


def summarize(model_rows: list[dict], cpd_rows: list[dict], ml_rows: list[dict],
              reference: str = "hybrid") -> dict:
    """Best baseline vs the reference model for every metric."""
    ref = next((r for r in model_rows if r["variant"] == reference), model_rows[0])
    cpd_label = lambda r: f"{r['method']}/{r['cost']}/{r['penalty']}"
    ml_label = lambda r: (f"ridge/w={r['w']}" if r["classifier"] == "ridge"
                          else f"cart/w={r['w']}/depth={r['max_depth']}/features={r['max_features']}")
    comparisons = []
    for key in METRIC_KEYS:
        entry = {"metric": key, "model": float(ref[key])}
        if key.startswith("cpd_"):
            entry["best_cpd_baseline"], entry["best_cpd_config"] = _best(cpd_rows, key, cpd_label)
            entry["improvement_vs_cpd"] = (improvement(entry["model"], entry["best_cpd_baseline"])
                                           if entry["best_cpd_baseline"] is not None else None)
        ml_key = key.replace("class_", "") if key.startswith("class_") else key
        entry["best_ml_baseline"], entry["best_ml_config"] = _best(ml_rows, ml_key, ml_label)
        entry["improvement_vs_ml"] = (improvement(entry["model"], entry["best_ml_baseline"])
                                      if entry["best_ml_baseline"] is not None else None)
        comparisons.append(entry)
    return {
        "reference_model": ref["variant"],
        "signal_scaling": "per-channel z-score with training-split mean and std",
        "improvement_formula": "model / best_baseline - 1",
        "comparisons": comparisons,
        "variants": {r["variant"]: {k: float(r[k]) for k in METRIC_KEYS} for r in model_rows},
    }


def timeline_rows(names, truths, sources: dict[str, list[LabelSequence]], states, period) -> list[dict]:
    rows = []
    for i, name in enumerate(names):
        for source, seqs in [("truth", truths)] + list(sources.items()):
            labels = seqs[i].valid()
            for t, s in enumerate(labels):
                rows.append({"trace": name, "step": t, "time_s": round(t * period, 6),
                             "source": source, "state": states[int(s)]})
    return rows


# -- experiment --------------------------------------------------------------------


@dataclass
class ExperimentReport:
    out_dir: Path
    stages_run: list[str]
    summary: dict
    timings: dict
    paths: dict[str, Path]


@contextmanager
def _stage(name, timings, stages_run):
    t0 = time.perf_counter()
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0
    stages_run.append(name)


def load_experiment_dataset(config: ExperimentConfig, out: Path) -> Dataset:
    if "manifest" in config.dataset:
        return load_dataset(config.dataset["manifest"])
    manifest = out / "dataset" / "manifest.json"
    if not manifest.exists():
        values = dict(config.dataset["simgen"])
        values.setdefault("seed", substream_int(config.seed, "simgen"))
        generate_dataset(SimConfig.from_dict(values), out / "dataset")
    return load_dataset(manifest)


def _split(config: ExperimentConfig, dataset: Dataset, out: Path):
    path = out / "split.json"
    if path.exists():
        record = json.loads(path.read_text())
        index = {n: i for i, n in enumerate(dataset.names)}
        parts = [dataset.subset([index[n] for n in record[k]]) for k in ("train", "validation", "test")]
        return parts, ChannelStats.from_dict(record["stats"]), False
    train_set, val, test = split_dataset(dataset, config.split_fractions, substream_int(config.seed, "split"))
    _, stats = normalize_channels(train_set)
    _write_json(path, {"fractions": list(config.split_fractions), "seed": config.seed,
                       "train": list(train_set.names), "validation": list(val.names),
                       "test": list(test.names), "stats": stats.to_dict()})
    return (train_set, val, test), stats, True


def run_experiment(config: ExperimentConfig, out_dir: Path | str | None = None) -> ExperimentReport:
    """Run (or resume) every stage; see the module docstring for the layout.

    Stages whose outputs exist are reused: deleting ``checkpoints/``
    retrains the models and re-scores them without touching the baselines.

    Raises
    ------
    StageError
        Naming the stage that failed.
    """
    out = Path(out_dir or config.out_dir or "experiment")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    timings: dict[str, float] = {}
    stages_run: list[str] = []
    paths: dict[str, Path] = {}

    with _stage("dataset", timings, stages_run):
        dataset = load_experiment_dataset(config, out)
    with _stage("split", timings, stages_run):
        (train_raw, val_raw, test_raw), stats, _ = _split(config, dataset, out)
        train_set, _ = normalize_channels(train_raw, stats)
        val_set, _ = normalize_channels(val_raw, stats)
        test_set, _ = normalize_channels(test_raw, stats)
        paths["split"] = out / "split.json"

    checkpoints: dict[str, ModelCheckpoint] = {}
    trained = []
    for variant in config.variants:
        ck_dir = out / "checkpoints" / variant
        if (ck_dir / "manifest.json").exists():
            checkpoints[variant] = ModelCheckpoint.load(ck_dir)
            continue
        with _stage(f"train:{variant}", timings, stages_run):
            model = build_model(config.model_config(dataset, variant))
            ckpt = train(model, train_set, val_set, stats=stats, taus_seconds=config.taus_seconds,
                         metrics_csv=ck_dir / "history.csv")
            ckpt.save(ck_dir)
            checkpoints[variant] = ModelCheckpoint.load(ck_dir)
            trained.append(variant)
    paths["checkpoints"] = out / "checkpoints"

    cpd_path = out / "cpd_baseline.csv"
    if cpd_path.exists():
        cpd_rows = read_csv(cpd_path)
    else:
        with _stage("cpd_baseline", timings, stages_run):
            cpd_rows = run_cpd_baselines(test_set, config.cpd_grid, config.taus_seconds, config.workers)
            write_csv(cpd_path, CPD_FIELDS, cpd_rows)
    paths["cpd_baseline"] = cpd_path

    ml_path = out / "ml_baseline.csv"
    if ml_path.exists():
        ml_rows = read_csv(ml_path)
    else:
        with _stage("ml_baseline", timings, stages_run):
            ml_rows = run_ml_baselines(train_set, test_set, config.ml_grid, config.seed,
                                       config.taus_seconds, config.workers)
            write_csv(ml_path, ML_FIELDS, ml_rows)
    paths["ml_baseline"] = ml_path

    with _stage("score", timings, stages_run):
        truths = test_raw.label_sequences()
        model_rows, predictions = [], {}
        for variant, ckpt in checkpoints.items():
            preds = predict_dataset(ckpt, test_raw)
            predictions[variant] = preds
            row = {"variant": variant, "parameters": ckpt.to_model().parameter_count(),
                   "epochs": len(ckpt.history), "best_epoch": _best_epoch(ckpt.history)}
            row.update(_score(truths, preds, dataset.catalog.n_states, dataset.sample_period,
                              config.taus_seconds))
            model_rows.append(row)
        paths["model_scores"] = write_csv(out / "model_scores.csv", MODEL_FIELDS, model_rows)
        paths["timeline"] = write_csv(
            out / "timeline.csv", TIMELINE_FIELDS,
            timeline_rows(test_raw.names, truths, predictions, dataset.catalog.states, dataset.sample_period),
        )

    with _stage("summary", timings, stages_run):
        summary = summarize(model_rows, cpd_rows, ml_rows)
        paths["summary"] = _write_json(out / "summary.json", summary)
    paths["timings"] = _write_json(out / "timings.json", timings)
    return ExperimentReport(out, stages_run, summary, timings, paths)


def _best_epoch(history: list[dict]) -> int:
    if not history:
        return 0
    scores = [h["class_f1"] for h in history]
    return int(np.argmax(scores)) + 1


# -- grid search -------------------------------------------------------------------


def _config_label(overrides: dict) -> str:
    return json.dumps(overrides, sort_keys=True, separators=(",", ":"))


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid needs at least one value per parameter")
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def rank_rows(rows: list[dict]) -> list[dict]:
    """Sort by classification F1, then CPD F1 at 5 s, then config label (all descending
    except the label, which is ascending); assign 1-based ranks."""
    ordered = sorted(rows, key=lambda r: (-r["class_f1"], -r["cpd_f1_tau5s"], r["config"]))
    for i, r in enumerate(ordered, 1):
        r["rank"] = i
    return ordered


def grid_search(config: ExperimentConfig, grid: dict[str, list], out_dir: Path | str | None = None,
                cap: int = GRID_CAP, allow_large: bool = False) -> list[dict]:
    """Train one model per grid cell and score it on the validation split.

    The default configuration (``config.model``) is always evaluated and
    flagged so tuned and default results can be contrasted.  Rows come
    back ranked; ``grid_search.csv`` and ``grid_best.json`` are written
    when ``out_dir`` is given.

    Raises
    ------
    ConfigError
        If the grid has more than ``cap`` cells and ``allow_large`` is off.
    """
    cells = expand_grid(grid)
    if len(cells) > cap and not allow_large:
        raise ConfigError(f"grid has {len(cells)} configurations, above the cap of {cap}; "
                          "pass allow_large to run it anyway")
    out = Path(out_dir or config.out_dir or "grid_search")
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_experiment_dataset(config, out)
    (train_raw, val_raw, _), stats, _ = _split(config, dataset, out)
    train_set, _ = normalize_channels(train_raw, stats)
    val_set, _ = normalize_channels(val_raw, stats)
    default = {k: config.model[k] for k in grid if k in config.model}
    labels = {_config_label(c) for c in cells}
    if _config_label(default) not in labels:
        cells.append(default)
    rows = []
    for cell in cells:
        mc = config.model_config(dataset, config.variants[0], **cell)
        model = build_model(mc)
        ckpt = train(model, train_set, val_set, stats=stats, taus_seconds=config.taus_seconds)
        preds = predict_dataset(ckpt, val_raw)
        row = {"config": _config_label(cell), "is_default": _config_label(cell) == _config_label(default),
               "parameters": ckpt.to_model().parameter_count()}
        row.update(_score(val_raw.label_sequences(), preds, dataset.catalog.n_states,
                          dataset.sample_period, config.taus_seconds))
        rows.append(row)
    ranked = rank_rows(rows)
    if out_dir is not None or config.out_dir is not None:
        write_csv(out / "grid_search.csv", GRID_FIELDS, ranked)
        default_row = next(r for r in ranked if r["is_default"])
        _write_json(out / "grid_best.json", {"best": ranked[0], "default": default_row})
    logger.info("best configuration %s (class F1 %.4f)", ranked[0]["config"], ranked[0]["class_f1"])
    return ranked


# -- transfer learning -------------------------------------------------------------


@dataclass
class TransferConfig:
    simgen: dict = field(default_factory=lambda: {"count": 40, "variant": "B"})
    folds: int = 5
    train_per_fold: int = 5
    validation_traces: int = 5
    seed: int = 0
    fine_tune_epochs: int = 50
    scratch_epochs: int | None = None
    fine_tune_lr: float | None = None
    selector: tuple[str, ...] = ("dense_hidden", "dense_out")

    def __post_init__(self):
        if self.folds < 3:
            raise ConfigError("transfer experiments need at least 3 folds")
        if self.train_per_fold < 1 or self.validation_traces < 1:
            raise ConfigError("fold and validation sizes must be positive")


def transfer_folds(n_traces: int, cfg: TransferConfig) -> tuple[list[list[int]], list[int], list[int]]:
    """Deterministic (fold training sets, validation indices, evaluation indices)."""
    need = cfg.folds * cfg.train_per_fold + cfg.validation_traces + 1
    if n_traces < need:
        raise ConfigError(f"transfer needs at least {need} variant-B traces "
                          f"({cfg.folds} x {cfg.train_per_fold} + reserve), got {n_traces}")
    order = substream(cfg.seed, "transfer_folds").permutation(n_traces).tolist()
    k = cfg.folds * cfg.train_per_fold
    folds = [sorted(order[i * cfg.train_per_fold : (i + 1) * cfg.train_per_fold]) for i in range(cfg.folds)]
    val = sorted(order[k : k + cfg.validation_traces])
    evaluation = sorted(order[k + cfg.validation_traces :])
    return folds, val, evaluation


def frozen_unchanged(source: ModelCheckpoint, tuned: ModelCheckpoint, selector: Sequence[str]) -> bool:
    """True when every parameter outside the selected layers is bit-identical."""
    for name, arr in source.params.items():
        layer = name.split(".")[0]
        if any(layer == s or layer.startswith(s) for s in selector):
            continue
        if arr.tobytes() != tuned.params[name].tobytes():
            return False
    return True


def transfer_experiment(source: ModelCheckpoint, cfg: TransferConfig, out_dir: Path | str | None = None,
                        dataset: Dataset | None = None) -> dict:
    """Fine-tune vs from-scratch on small folds of a shifted-dynamics dataset.

    Returns ``{"rows": per-fold rows, "means": {mode: metric means},
    "freeze_ok": [bool per fold]}`` and writes ``transfer.csv`` (fold rows
    followed by ``mean`` rows) when ``out_dir`` is given.
    """
    out = Path(out_dir) if out_dir is not None else None
    if dataset is None:
        values = dict(cfg.simgen)
        values.setdefault("seed", substream_int(cfg.seed, "simgen_b"))
        dataset = generate_dataset(SimConfig.from_dict(values), None if out is None else out / "dataset_b")
    folds, val_idx, eval_idx = transfer_folds(dataset.Z, cfg)
    val_raw = dataset.subset(val_idx)
    eval_raw = dataset.subset(eval_idx)
    truths = eval_raw.label_sequences()
    n_states, period = dataset.catalog.n_states, dataset.sample_period
    rows, freeze_ok = [], []
    for f, idx in enumerate(folds):
        train_raw = dataset.subset(idx)
        tuned = fine_tune(source, train_raw, val_raw, cfg.selector, max_epochs=cfg.fine_tune_epochs,
                          learning_rate=cfg.fine_tune_lr)
        freeze_ok.append(frozen_unchanged(source, tuned, cfg.selector))
        tuned_row = {"fold": f, "mode": "fine_tune", "train_traces": " ".join(train_raw.names)}
        tuned_row.update(_score(truths, predict_dataset(tuned, eval_raw), n_states, period, DEFAULT_TAUS_SECONDS))
        rows.append(tuned_row)

        train_set, stats = normalize_channels(train_raw)
        val_set, _ = normalize_channels(val_raw, stats)
        scratch_cfg = replace(source.config, seed=substream_int(cfg.seed, f"scratch/{f}"))
        scratch = train(build_model(scratch_cfg), train_set, val_set, stats=stats,
                        max_epochs=cfg.scratch_epochs)
        scratch_row = {"fold": f, "mode": "scratch", "train_traces": " ".join(train_raw.names)}
        scratch_row.update(_score(truths, predict_dataset(scratch, eval_raw), n_states, period,
                                  DEFAULT_TAUS_SECONDS))
        rows.append(scratch_row)
        logger.info("fold %d: fine-tuned F1 %.4f, scratch F1 %.4f", f, tuned_row["class_f1"],
                    scratch_row["class_f1"])
    means = {}
    for mode in ("fine_tune", "scratch"):
        sel = [r for r in rows if r["mode"] == mode]
        means[mode] = {k: float(np.mean([r[k] for r in sel])) for k in METRIC_KEYS}
    if out is not None:
        mean_rows = [{"fold": "mean", "mode": m, "train_traces": "", **v} for m, v in means.items()]
        write_csv(out / "transfer.csv", TRANSFER_FIELDS, rows + mean_rows)
        _write_json(out / "transfer_summary.json", {"means": means, "freeze_ok": freeze_ok,
                                                    "folds": folds, "validation": val_idx,
                                                    "evaluation": eval_idx})
    return {"rows": rows, "means": means, "freeze_ok": freeze_ok}
