"""Classical change-point detection on one simulated flight.

Compares search methods and costs against the true state changes at a
5 s tolerance.
"""

from traceinfer.cpd import detect_change_points
from traceinfer.metrics import cpd_score, tau_steps
from traceinfer.simgen import SimConfig, generate_dataset
from traceinfer.trace import extract_change_points, normalize_channels

dataset = generate_dataset(SimConfig(count=1, seed=7, min_len=600, max_len=1200))
normed, _ = normalize_channels(dataset)
trace, _ = normed.traces[0]
truth = extract_change_points(normed.label_sequences()[0])
print(f"{trace.length} samples, true changes at {[t for t, _ in truth.entries[1:]]}")

tau = tau_steps(5.0, dataset.sample_period)
for method in ("pelt", "bottom_up", "window"):
    for kind in ("l2", "l1", "linear"):
        for penalty in (100.0, 1000.0):
            seg = detect_change_points(trace.samples, kind, method, penalty=penalty)
            r = cpd_score(truth, seg.change_points, tau)
            print(f"{method:9s} {kind:6s} beta={penalty:<6g} {len(seg.change_points):3d} changes  F1 {r.f1:.3f}")
