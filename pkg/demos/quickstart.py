"""Simulate a few flights, train a small hybrid model and score it.

Run with ``python demos/quickstart.py [out_dir]``; takes about a minute.
"""

import sys
from pathlib import Path

from traceinfer.metrics import evaluate_predictions
from traceinfer.nn import ModelConfig, build_model, predict_dataset, train
from traceinfer.simgen import SimConfig, generate_dataset
from traceinfer.trace import normalize_channels, split_dataset


def main(out: Path) -> None:
    dataset = generate_dataset(SimConfig(count=20, seed=1, min_len=400, max_len=900), out / "dataset")
    train_raw, val_raw, test_raw = split_dataset(dataset, (0.8, 0.1, 0.1), seed=0)
    train_set, stats = normalize_channels(train_raw)
    val_set, _ = normalize_channels(val_raw, stats)

    config = ModelConfig(n_channels=len(dataset.schema), n_states=dataset.catalog.n_states,
                         conv_stack=((16, 3), (16, 5), (16, 10)), gru_stack=(32,), dense_hidden=32,
                         learning_rate=3e-3, max_epochs=15, patience=5)
    ckpt = train(build_model(config), train_set, val_set, stats=stats)
    ckpt.save(out / "checkpoint")

    # checkpoints carry their own normalization, so prediction takes raw traces
    preds = predict_dataset(ckpt, test_raw)
    scores = evaluate_predictions(test_raw.label_sequences(), preds, dataset.catalog.n_states,
                                  dataset.sample_period)
    for key in ("cpd_f1_tau1s", "cpd_f1_tau5s", "class_f1"):
        print(f"{key:14s} {scores[key]:.3f}")
    truth = test_raw.label_sequences()[0].valid()[::50]
    guess = preds[0].valid()[::50]
    states = dataset.catalog.states
    print("every 10 s of the first test flight (truth -> predicted):")
    for t, g in zip(truth, guess):
        print(f"  {states[t]:14s} -> {states[g]}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("quickstart_out"))
