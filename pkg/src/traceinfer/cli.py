"""Command line interface: ``traceinfer <subcommand> [options]``.

Global options (before the subcommand) are ``--config`` (JSON experiment
config), ``--seed``, ``--out`` and ``--threads``.  Heavy modules are
imported lazily so ``--threads`` can cap the BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _experiment_config(args, **overrides):
    from .pipeline import ExperimentConfig

    values = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(values)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simgen(args):
    from .simgen import SimConfig, generate_dataset

    cfg = SimConfig(count=args.count, seed=args.seed or 0, variant=args.variant,
                    min_len=args.min_len, max_len=args.max_len)
    out = _out(args, "dataset")
    ds = generate_dataset(cfg, out)
    print(f"wrote {ds.Z} flights to {out / 'manifest.json'}")


def cmd_train(args):
    from .nn import build_model, train
    from .pipeline import ExperimentConfig, _split, load_experiment_dataset
    from .trace import normalize_channels

    cfg = _experiment_config(args, dataset={"manifest": args.data} if args.data else None)
    out = _out(args, "train_out")
    dataset = load_experiment_dataset(cfg, out)
    (tr, va, _), stats, _ = _split(cfg, dataset, out)
    tr, _ = normalize_channels(tr, stats)
    va, _ = normalize_channels(va, stats)
    overrides = {"max_epochs": args.epochs} if args.epochs else {}
    model = build_model(cfg.model_config(dataset, args.variant, **overrides))
    ckpt = train(model, tr, va, stats=stats, metrics_csv=out / "checkpoint" / "history.csv")
    ckpt.save(out / "checkpoint")
    print(f"checkpoint written to {out / 'checkpoint'} ({len(ckpt.history)} epochs)")


def cmd_predict(args):
    from .nn import ModelCheckpoint, predict_dataset
    from .trace import load_dataset, write_trace_csv

    ckpt = ModelCheckpoint.load(args.checkpoint)
    dataset = load_dataset(args.data)
    out = _out(args, "predictions")
    preds = predict_dataset(ckpt, dataset)
    for name, (trace, _), seq in zip(dataset.names, dataset.traces, preds):
        write_trace_csv(out / f"{name}.csv", trace, seq, dataset.catalog)
    manifest = json.loads(Path(args.data).read_text())
    manifest["flights"] = [f"{n}.csv" for n in dataset.names]
    manifest["length_bounds"] = [0, 10**9]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"predicted {len(preds)} traces into {out}")


def cmd_eval(args):
    from .metrics import evaluate_predictions
    from .pipeline import METRIC_KEYS, write_csv
    from .trace import load_dataset

    truth = load_dataset(args.truth, min_len=0, max_len=10**9)
    pred = load_dataset(args.pred, min_len=0, max_len=10**9)
    index = {n: i for i, n in enumerate(pred.names)}
    missing = [n for n in truth.names if n not in index]
    if missing:
        raise SystemExit(f"predictions missing for {missing[:5]}")
    pred = pred.subset([index[n] for n in truth.names])
    row = evaluate_predictions(truth.label_sequences(), pred.label_sequences(), truth.catalog.n_states,
                               truth.sample_period)
    out = _out(args, "eval_out")
    write_csv(out / "scores.csv", METRIC_KEYS, [row])
    for k in METRIC_KEYS:
        print(f"{k:24s} {row[k]:.4f}")


def _baseline_sets(args):
    from .pipeline import _split, load_experiment_dataset
    from .trace import normalize_channels

    cfg = _experiment_config(args, dataset={"manifest": args.data} if args.data else None)
    out = _out(args, "baselines")
    dataset = load_experiment_dataset(cfg, out)
    (tr, _, te), stats, _ = _split(cfg, dataset, out)
    return cfg, out, normalize_channels(tr, stats)[0], normalize_channels(te, stats)[0]


def cmd_cpd_baseline(args):
    from .pipeline import CPD_FIELDS, run_cpd_baselines, write_csv

    cfg, out, _, test = _baseline_sets(args)
    rows = run_cpd_baselines(test, cfg.cpd_grid, cfg.taus_seconds, cfg.workers)
    print(f"wrote {write_csv(out / 'cpd_baseline.csv', CPD_FIELDS, rows)}")


def cmd_ml_baseline(args):
    from .pipeline import ML_FIELDS, run_ml_baselines, write_csv

    cfg, out, train_set, test = _baseline_sets(args)
    rows = run_ml_baselines(train_set, test, cfg.ml_grid, cfg.seed, cfg.taus_seconds, cfg.workers)
    print(f"wrote {write_csv(out / 'ml_baseline.csv', ML_FIELDS, rows)}")


def cmd_grid_search(args):
    from .pipeline import grid_search

    cfg = _experiment_config(args)
    grid = json.loads(Path(args.grid).read_text())
    rows = grid_search(cfg, grid, _out(args, "grid_search"), cap=args.cap, allow_large=args.allow_large)
    best = rows[0]
    print(f"best: {best['config']} class F1 {best['class_f1']:.4f}")


def cmd_transfer(args):
    from .nn import ModelCheckpoint
    from .pipeline import TransferConfig, transfer_experiment

    values = json.loads(Path(args.transfer_config).read_text()) if args.transfer_config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.folds:
        values["folds"] = args.folds
    result = transfer_experiment(ModelCheckpoint.load(args.checkpoint), TransferConfig(**values),
                                 _out(args, "transfer"))
    for mode, means in result["means"].items():
        print(f"{mode:10s} class F1 {means['class_f1']:.4f}")
    print("freeze contract held in every fold" if all(result["freeze_ok"]) else "freeze contract VIOLATED")


def cmd_report(args):
    from .pipeline import run_experiment

    cfg = _experiment_config(args)
    report = run_experiment(cfg, _out(args, "experiment"))
    for c in report.summary["comparisons"]:
        print(f"{c['metric']:24s} model {c['model']:.4f}  best ML {c['best_ml_baseline']:.4f}")
    print(f"reports in {report.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="traceinfer", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="cap on BLAS / numba threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simgen", help="simulate a labelled flight dataset")
    s.add_argument("--count", type=int, default=120)
    s.add_argument("--variant", default="A", choices=["A", "B"])
    s.add_argument("--min-len", type=int, default=800)
    s.add_argument("--max-len", type=int, default=2500)
    s.set_defaults(func=cmd_simgen)

    s = sub.add_parser("train", help="train one model variant")
    s.add_argument("--data", help="dataset manifest (overrides the config's dataset)")
    s.add_argument("--variant", default="hybrid")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="label every trace of a dataset with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score predicted labels against ground truth")
    s.add_argument("--truth", required=True, help="ground-truth manifest")
    s.add_argument("--pred", required=True, help="prediction manifest written by 'predict'")
    s.set_defaults(func=cmd_eval)

    for name, func, help_ in (("cpd-baseline", cmd_cpd_baseline, "change-point detection baseline grid"),
                              ("ml-baseline", cmd_ml_baseline, "sliding-window ridge / CART grid")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", help="dataset manifest (overrides the config's dataset)")
        s.set_defaults(func=func)

    s = sub.add_parser("grid-search", help="rank model configurations on the validation split")
    s.add_argument("--grid", required=True, help='JSON object of value lists, e.g. {"learning_rate": [0.001, 0.003]}')
    s.add_argument("--cap", type=int, default=64)
    s.add_argument("--allow-large", action="store_true")
    s.set_defaults(func=cmd_grid_search)

    s = sub.add_parser("transfer", help="fine-tune vs from-scratch on variant-B folds")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--transfer-config", help="JSON with TransferConfig fields")
    s.add_argument("--folds", type=int)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("report", help="run the full experiment and write all reports")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
