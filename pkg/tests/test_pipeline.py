import json
import shutil

import numpy as np
import pytest

from traceinfer.nn import ModelCheckpoint
from traceinfer.pipeline import (
    CPD_FIELDS,
    GRID_FIELDS,
    METRIC_KEYS,
    ML_FIELDS,
    MODEL_FIELDS,
    TIMELINE_FIELDS,
    TRANSFER_FIELDS,
    ConfigError,
    ExperimentConfig,
    StageError,
    TransferConfig,
    expand_grid,
    frozen_unchanged,
    grid_search,
    improvement,
    rank_rows,
    read_csv,
    run_experiment,
    summarize,
    transfer_experiment,
    transfer_folds,
)

TINY_MODEL = {"conv_stack": [[6, 3], [6, 5]], "gru_stack": [8], "dense_hidden": 8,
              "max_epochs": 2, "learning_rate": 1e-2}


def tiny_experiment(**kw) -> ExperimentConfig:
    values = dict(
        dataset={"simgen": {"count": 10, "min_len": 300, "max_len": 700}},
        seed=4,
        model=dict(TINY_MODEL),
        cpd_grid={"methods": ["bottom_up", "window"], "costs": ["l2"], "penalties": [100, 1000]},
        ml_grid={"windows": [5], "classifiers": ["ridge", "cart"], "max_depths": [4],
                 "max_features": ["sqrt"]},
    )
    values.update(kw)
    return ExperimentConfig(**values)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return run_experiment(tiny_experiment(), out)


# -- configuration -------------------------------------------------------------------


def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.dataset == {"simgen": {"count": 120}}
    assert cfg.split_fractions == (0.8, 0.1, 0.1)
    assert cfg.cpd_grid["penalties"] == [100.0, 500.0, 1000.0]
    assert set(cfg.cpd_grid["costs"]) == {"l1", "l2", "linear", "kernel"}


@pytest.mark.parametrize("kw", [
    {"dataset": {"other": 1}},
    {"dataset": {"manifest": "/nonexistent/manifest.json"}},
    {"variants": ()},
    {"cpd_grid": {"methods": [], "costs": ["l2"], "penalties": [1]}},
    {"ml_grid": {"windows": [5], "classifiers": []}},
    {"taus_seconds": (0.0,)},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sed": 1})


def test_config_json_round_trip(tmp_path):
    cfg = tiny_experiment()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_json(path) == cfg


# -- run_experiment ------------------------------------------------------------------


def test_experiment_artifacts(experiment):
    out = experiment.out_dir
    for name in ("config.json", "split.json", "cpd_baseline.csv", "ml_baseline.csv", "model_scores.csv",
                 "timeline.csv", "summary.json", "timings.json", "checkpoints/hybrid/manifest.json",
                 "checkpoints/hybrid/history.csv", "dataset/manifest.json"):
        assert (out / name).exists(), name
    split = json.loads((out / "split.json").read_text())
    assert (len(split["train"]), len(split["validation"]), len(split["test"])) == (8, 1, 1)
    assert len(read_csv(out / "cpd_baseline.csv")) == 4
    assert len(read_csv(out / "ml_baseline.csv")) == 2
    assert experiment.stages_run[:2] == ["dataset", "split"]
    assert "train:hybrid" in experiment.stages_run


def test_csv_headers(experiment):
    out = experiment.out_dir
    for name, fields in (("cpd_baseline.csv", CPD_FIELDS), ("ml_baseline.csv", ML_FIELDS),
                         ("model_scores.csv", MODEL_FIELDS), ("timeline.csv", TIMELINE_FIELDS)):
        assert (out / name).read_text().splitlines()[0] == ",".join(fields)
    assert MODEL_FIELDS[:4] == ("variant", "parameters", "epochs", "best_epoch")
    assert CPD_FIELDS[:4] == ("method", "cost", "penalty", "signal_scaling")
    assert METRIC_KEYS[-3:] == ("class_precision", "class_recall", "class_f1")
    assert "cpd_f1_tau5s" in METRIC_KEYS


def test_summary_contents(experiment):
    summary = experiment.summary
    assert summary["reference_model"] == "hybrid"
    assert summary["improvement_formula"] == "model / best_baseline - 1"
    by_metric = {c["metric"]: c for c in summary["comparisons"]}
    assert set(by_metric) == set(METRIC_KEYS)
    cpd_rows = read_csv(experiment.out_dir / "cpd_baseline.csv")
    best = max(float(r["cpd_f1_tau5s"]) for r in cpd_rows)
    assert by_metric["cpd_f1_tau5s"]["best_cpd_baseline"] == best
    assert "best_cpd_baseline" not in by_metric["class_f1"]


def test_timeline_covers_test_steps(experiment):
    rows = read_csv(experiment.out_dir / "timeline.csv")
    assert {r["source"] for r in rows} == {"truth", "hybrid"}
    truth = [r for r in rows if r["source"] == "truth"]
    assert len(truth) == len([r for r in rows if r["source"] == "hybrid"])


def test_resume_after_deleting_checkpoints(experiment, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(experiment.out_dir, out)
    before = {n: (out / n).read_bytes() for n in ("cpd_baseline.csv", "ml_baseline.csv", "model_scores.csv")}
    shutil.rmtree(out / "checkpoints")
    report = run_experiment(tiny_experiment(), out)
    assert "train:hybrid" in report.stages_run
    assert "cpd_baseline" not in report.stages_run and "ml_baseline" not in report.stages_run
    for name, data in before.items():
        assert (out / name).read_bytes() == data


def test_resume_with_everything_present_trains_nothing(experiment, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(experiment.out_dir, out)
    report = run_experiment(tiny_experiment(), out)
    assert not any(s.startswith("train") for s in report.stages_run)
    assert report.summary == experiment.summary


def test_stage_error_names_the_stage(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text("{not json")
    with pytest.raises(StageError) as info:
        run_experiment(tiny_experiment(dataset={"manifest": str(manifest)}), tmp_path / "out")
    assert info.value.stage == "dataset"


# -- summary helpers -----------------------------------------------------------------


def test_improvement_formula():
    assert improvement(0.9, 0.6) == pytest.approx(0.5)
    assert improvement(0.3, 0.6) == pytest.approx(-0.5)
    assert improvement(0.5, 0.0) is None


def _metric_row(**kw):
    row = {k: 0.0 for k in METRIC_KEYS}
    row.update(kw)
    return row


def test_summarize_picks_best_baselines():
    model = [_metric_row(variant="hybrid", cpd_f1_tau5s=0.8, class_f1=0.9),
             _metric_row(variant="cnn_only", class_f1=0.95)]
    cpd = [dict(_metric_row(cpd_f1_tau5s=0.2), method="window", cost="l2", penalty=100.0),
           dict(_metric_row(cpd_f1_tau5s=0.4), method="bottom_up", cost="l1", penalty=500.0)]
    ml = [dict(_metric_row(f1=0.6, precision=0.6, recall=0.6), w=5, classifier="ridge",
               max_depth=None, max_features=None),
          dict(_metric_row(f1=0.75, precision=0.7, recall=0.8), w=9, classifier="cart",
               max_depth="none", max_features="sqrt")]
    s = summarize(model, cpd, ml)
    by = {c["metric"]: c for c in s["comparisons"]}
    assert by["cpd_f1_tau5s"]["best_cpd_config"] == "bottom_up/l1/500.0"
    assert by["cpd_f1_tau5s"]["improvement_vs_cpd"] == pytest.approx(1.0)
    assert by["class_f1"]["best_ml_baseline"] == 0.75
    assert by["class_f1"]["best_ml_config"] == "cart/w=9/depth=none/features=sqrt"
    assert by["class_f1"]["improvement_vs_ml"] == pytest.approx(0.2)
    assert s["variants"]["cnn_only"]["class_f1"] == 0.95


# -- grid search ---------------------------------------------------------------------


def test_expand_grid_order():
    cells = expand_grid({"b": [1, 2], "a": ["x", "y"]})
    assert cells == [{"a": "x", "b": 1}, {"a": "x", "b": 2}, {"a": "y", "b": 1}, {"a": "y", "b": 2}]
    with pytest.raises(ConfigError):
        expand_grid({"a": []})


def test_rank_rows_breaks_ties():
    rows = [{"config": "b", "class_f1": 0.9, "cpd_f1_tau5s": 0.5},
            {"config": "a", "class_f1": 0.9, "cpd_f1_tau5s": 0.5},
            {"config": "c", "class_f1": 0.9, "cpd_f1_tau5s": 0.7},
            {"config": "d", "class_f1": 0.95, "cpd_f1_tau5s": 0.1}]
    ranked = rank_rows(rows)
    assert [r["config"] for r in ranked] == ["d", "c", "a", "b"]
    assert [r["rank"] for r in ranked] == [1, 2, 3, 4]


def test_grid_search_cap():
    grid = {"learning_rate": [1e-3, 2e-3, 3e-3], "dense_hidden": [4, 8, 16]}
    with pytest.raises(ConfigError):
        grid_search(tiny_experiment(), grid, cap=8)


def test_grid_search_two_by_two(tmp_path):
    grid = {"learning_rate": [1e-2, 3e-3], "dense_hidden": [8, 4]}
    rows = grid_search(tiny_experiment(), grid, tmp_path)
    assert len(rows) == 4
    assert sum(r["is_default"] for r in rows) == 1
    assert [r["rank"] for r in rows] == [1, 2, 3, 4]
    written = read_csv(tmp_path / "grid_search.csv")
    assert list(written[0]) == list(GRID_FIELDS) and len(written) == 4
    best = json.loads((tmp_path / "grid_best.json").read_text())
    assert best["best"]["config"] == rows[0]["config"]


def test_grid_search_adds_default(tmp_path):
    rows = grid_search(tiny_experiment(), {"dense_hidden": [4]}, tmp_path)
    assert len(rows) == 2
    assert {r["config"] for r in rows if r["is_default"]} == {'{"dense_hidden":8}'}


# -- transfer ------------------------------------------------------------------------


def test_transfer_config_needs_three_folds():
    with pytest.raises(ConfigError):
        TransferConfig(folds=2)
    with pytest.raises(ConfigError):
        TransferConfig(train_per_fold=0)


def test_transfer_folds_partition():
    cfg = TransferConfig(folds=5, train_per_fold=5, validation_traces=5, seed=1)
    folds, val, evaluation = transfer_folds(40, cfg)
    assert len(folds) == 5 and all(len(f) == 5 for f in folds)
    used = [i for f in folds for i in f] + val + evaluation
    assert sorted(used) == list(range(40))
    assert transfer_folds(40, cfg) == (folds, val, evaluation)
    assert transfer_folds(40, TransferConfig(seed=2)) != (folds, val, evaluation)
    with pytest.raises(ConfigError):
        transfer_folds(30, cfg)


def test_transfer_experiment_small(experiment, tmp_path):
    source = ModelCheckpoint.load(experiment.out_dir / "checkpoints" / "hybrid")
    cfg = TransferConfig(simgen={"count": 9, "variant": "B", "min_len": 300, "max_len": 900},
                         folds=3, train_per_fold=2, validation_traces=2, fine_tune_epochs=2,
                         scratch_epochs=2)
    result = transfer_experiment(source, cfg, tmp_path)
    assert result["freeze_ok"] == [True, True, True]
    assert [(r["fold"], r["mode"]) for r in result["rows"]] == [
        (f, m) for f in range(3) for m in ("fine_tune", "scratch")]
    for mode in ("fine_tune", "scratch"):
        sel = [r["class_f1"] for r in result["rows"] if r["mode"] == mode]
        assert result["means"][mode]["class_f1"] == pytest.approx(np.mean(sel))
    written = read_csv(tmp_path / "transfer.csv")
    assert list(written[0]) == list(TRANSFER_FIELDS)
    assert [r["fold"] for r in written[-2:]] == ["mean", "mean"]


def test_frozen_unchanged_detects_change(experiment):
    source = ModelCheckpoint.load(experiment.out_dir / "checkpoints" / "hybrid")
    tuned = ModelCheckpoint.load(experiment.out_dir / "checkpoints" / "hybrid")
    tuned.params["dense_out.W"] = tuned.params["dense_out.W"] + 1.0
    assert frozen_unchanged(source, tuned, ["dense_out"])
    name = next(k for k in tuned.params if k.startswith("conv"))
    tuned.params[name] = tuned.params[name] * 2.0
    assert not frozen_unchanged(source, tuned, ["dense_out"])
