import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traceinfer.trace import (
    AUTOPILOT_SCHEMA,
    ChangePointAnnotation,
    ChannelSpec,
    Dataset,
    LabelSequence,
    MultivariateTrace,
    StateCatalog,
    TraceError,
    expand_annotation,
    extract_change_points,
    load_dataset,
    normalize_channels,
    pad_and_mask,
    save_dataset,
    split_dataset,
)

A, B = 0, 1
CATALOG = StateCatalog(("A", "B", "C"))


def make_trace(samples, schema=AUTOPILOT_SCHEMA[:1]):
    return MultivariateTrace(schema, np.asarray(samples, dtype=float).reshape(len(samples), -1))


def make_dataset(lengths, n_channels=2, seed=0):
    rng = np.random.default_rng(seed)
    schema = AUTOPILOT_SCHEMA[:n_channels]
    traces = []
    for n in lengths:
        tr = MultivariateTrace(schema, rng.normal(size=(n, n_channels)))
        traces.append((tr, ChangePointAnnotation(((0, 0), (n // 2, 1)))))
    return Dataset(tuple(traces), CATALOG)


# -- domain types ---------------------------------------------------------------


def test_schema_names_must_be_unique():
    with pytest.raises(TraceError):
        MultivariateTrace((ChannelSpec("a", "input"), ChannelSpec("a", "output")), np.zeros((3, 2)))


def test_channel_kind_validated():
    with pytest.raises(TraceError):
        ChannelSpec("a", "sideways")


def test_trace_rejects_non_finite_and_wrong_width():
    with pytest.raises(TraceError):
        make_trace([0.0, np.nan])
    with pytest.raises(TraceError):
        MultivariateTrace(AUTOPILOT_SCHEMA[:2], np.zeros((4, 3)))


def test_catalog_invariants():
    with pytest.raises(TraceError):
        StateCatalog(("only",))
    with pytest.raises(TraceError):
        StateCatalog(("a", "a"))
    assert CATALOG.pad_id == 3
    with pytest.raises(TraceError, match="'Z'"):
        CATALOG.index("Z")


@pytest.mark.parametrize("entries", [
    (),
    ((1, A),),
    ((0, A), (0, B)),
    ((0, A), (3, B), (2, A)),
    ((0, A), (2, A)),
])
def test_annotation_invariants(entries):
    with pytest.raises(TraceError):
        ChangePointAnnotation(entries)


def test_repeated_non_consecutive_states_allowed():
    assert len(ChangePointAnnotation(((0, A), (2, B), (4, A)))) == 3


# -- expand / extract -------------------------------------------------------------


@pytest.mark.parametrize("entries, length, expected", [
    (((0, A), (5, B)), 8, [A, A, A, A, A, B, B, B]),
    (((0, A),), 3, [A, A, A]),
    (((0, A), (2, B), (4, A)), 6, [A, A, B, B, A, A]),
])
def test_expand_annotation(entries, length, expected):
    seq = expand_annotation(ChangePointAnnotation(entries), length)
    assert seq.labels.tolist() == expected
    assert seq.mask.all()


def test_expand_rejects_entry_past_end():
    with pytest.raises(TraceError):
        expand_annotation(ChangePointAnnotation(((0, A), (5, B))), 5)


@pytest.mark.parametrize("labels, expected", [
    ([A, A, B, B], ((0, A), (2, B))),
    ([A, A, A], ((0, A),)),
    ([A, B, A], ((0, A), (1, B), (2, A))),
])
def test_extract_change_points(labels, expected):
    assert extract_change_points(LabelSequence(labels)).entries == expected


def test_extract_ignores_masked_suffix():
    seq = LabelSequence([A, A, B, 3, 3], [True, True, True, False, False])
    assert extract_change_points(seq).entries == ((0, A), (2, B))


def test_extract_fully_masked_fails():
    with pytest.raises(TraceError):
        extract_change_points(LabelSequence([A, A], [False, False]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_round_trip_expand_extract(labels):
    seq = LabelSequence(labels)
    cp = extract_change_points(seq)
    assert expand_annotation(cp, len(labels)) == seq
    assert extract_change_points(expand_annotation(cp, len(labels))) == cp


# -- padding ------------------------------------------------------------------------


def test_pad_and_mask():
    tr = make_trace([1.0, 2.0, 3.0])
    seq = LabelSequence([A, B, B])
    ptr, pseq = pad_and_mask(tr, seq, 5, pad_id=CATALOG.pad_id)
    assert pseq.mask.tolist() == [True, True, True, False, False]
    assert pseq.labels.tolist() == [A, B, B, 3, 3]
    assert np.all(ptr.samples[3:] == 0.0)
    assert np.array_equal(ptr.samples[:3], tr.samples)


def test_pad_identity_when_full_length():
    tr = make_trace([1.0, 2.0])
    seq = LabelSequence([A, B])
    ptr, pseq = pad_and_mask(tr, seq, 2, pad_id=3)
    assert np.array_equal(ptr.samples, tr.samples)
    assert pseq == seq


def test_pad_rejects_long_trace():
    with pytest.raises(TraceError):
        pad_and_mask(make_trace([1.0, 2.0, 3.0]), LabelSequence([A, A, A]), 2, pad_id=3)


# -- normalization ------------------------------------------------------------------


def test_constant_channel_normalizes_to_zero():
    ds = Dataset(((make_trace([4.0, 4.0, 4.0]), ChangePointAnnotation(((0, A),))),), CATALOG)
    out, stats = normalize_channels(ds)
    assert np.all(out.traces[0][0].samples == 0.0)
    assert stats.std[0] == 0.0


def test_two_point_normalization():
    ds = Dataset(((make_trace([0.0, 2.0]), ChangePointAnnotation(((0, A),))),), CATALOG)
    out, stats = normalize_channels(ds)
    assert stats.mean[0] == 1.0 and stats.std[0] == 1.0
    assert out.traces[0][0].samples[:, 0].tolist() == [-1.0, 1.0]


def test_normalization_moments_and_reuse():
    ds = make_dataset([50, 70, 30], n_channels=3)
    shifted = Dataset(tuple((MultivariateTrace(t.schema, 5 + 3 * t.samples), cp) for t, cp in ds.traces),
                      CATALOG)
    out, stats = normalize_channels(shifted)
    stacked = np.concatenate([t.samples for t, _ in out.traces])
    assert np.allclose(stacked.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(stacked.std(axis=0), 1.0, atol=1e-9)
    twice, _ = normalize_channels(out, stats)
    assert not np.allclose(twice.traces[0][0].samples, out.traces[0][0].samples)


def test_normalization_needs_training_data():
    with pytest.raises(TraceError):
        normalize_channels(Dataset((), CATALOG))


# -- splitting ------------------------------------------------------------------------


@pytest.mark.parametrize("z, fractions, sizes", [
    (20, (0.9, 0.05, 0.05), (18, 1, 1)),
    (10, (0.7, 0.2, 0.1), (7, 2, 1)),
])
def test_split_sizes(z, fractions, sizes):
    parts = split_dataset(make_dataset([20] * z), fractions, seed=1)
    assert tuple(p.Z for p in parts) == sizes


def test_split_is_a_deterministic_partition():
    ds = make_dataset([20 + i for i in range(30)])
    a = split_dataset(ds, (0.6, 0.2, 0.2), seed=7)
    b = split_dataset(ds, (0.6, 0.2, 0.2), seed=7)
    assert [p.names for p in a] == [p.names for p in b]
    names = [n for p in a for n in p.names]
    assert sorted(names) == sorted(ds.names)
    assert len(set(names)) == len(names)


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.0), (0.5, 0.3, 0.3), (1.0, 0.0)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(TraceError):
        split_dataset(make_dataset([20] * 10), fractions)


def test_split_rejects_empty_part():
    with pytest.raises(TraceError):
        split_dataset(make_dataset([20] * 3), (0.9, 0.05, 0.05))


# -- files ---------------------------------------------------------------------------


def test_save_load_round_trip_is_bit_exact(tmp_path):
    ds = make_dataset([210, 250, 300], n_channels=10)
    path = save_dataset(ds, tmp_path)
    loaded = load_dataset(path)
    assert loaded.names == ds.names
    for (a, ca), (b, cb) in zip(ds.traces, loaded.traces):
        assert np.array_equal(a.samples, b.samples)
        assert ca == cb


def test_length_filter_drops_short_flights(tmp_path):
    path = save_dataset(make_dataset([150, 220, 400], n_channels=10), tmp_path)
    assert load_dataset(path).Z == 2
    assert load_dataset(path, min_len=100).Z == 3


def test_unknown_state_label_is_named(tmp_path):
    path = save_dataset(make_dataset([210], n_channels=10), tmp_path)
    csv_path = tmp_path / "flight_0000.csv"
    csv_path.write_text(csv_path.read_text().replace(",B\n", ",cartwheel\n", 1))
    with pytest.raises(TraceError, match="cartwheel"):
        load_dataset(path)


def test_missing_column_and_non_numeric_cell(tmp_path):
    path = save_dataset(make_dataset([210], n_channels=10), tmp_path)
    csv_path = tmp_path / "flight_0000.csv"
    original = csv_path.read_text()
    csv_path.write_text(original.replace("altitude", "height", 1))
    with pytest.raises(TraceError, match="missing columns"):
        load_dataset(path)
    lines = original.splitlines()
    lines[5] = lines[5].replace(lines[5].split(",")[2], "abc", 1)
    csv_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceError, match="non-numeric"):
        load_dataset(path)


def test_manifest_must_list_flights(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"schema": [], "states": ["a", "b"]}))
    with pytest.raises(TraceError):
        load_dataset(tmp_path / "manifest.json")


def test_dataset_schema_must_be_consistent():
    a = MultivariateTrace(AUTOPILOT_SCHEMA[:2], np.zeros((5, 2)))
    b = MultivariateTrace(AUTOPILOT_SCHEMA[1:3], np.zeros((5, 2)))
    cp = ChangePointAnnotation(((0, A),))
    with pytest.raises(TraceError):
        Dataset(((a, cp), (b, cp)), CATALOG)
