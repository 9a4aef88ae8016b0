"""Traces, state annotations and label sequences.

A flight is stored as a :class:`MultivariateTrace` (``l_T x n`` samples at a
fixed sample period) together with a :class:`ChangePointAnnotation`, the
sorted list of ``(time step, entered state)`` tuples.  The annotation always
carries an entry at ``t = 0`` naming the initial state so that it expands to
a full per-step :class:`LabelSequence`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MIN_LEN = 200
DEFAULT_MAX_LEN = 20000
MANIFEST_VERSION = 1


class TraceError(ValueError):
    """Raised for malformed traces, annotations or dataset files."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str  # "input" or "output"
    unit: str = ""

    def __post_init__(self):
        if self.kind not in ("input", "output"):
            raise TraceError(f"channel {self.name!r}: kind must be input/output, got {self.kind!r}")


AUTOPILOT_SCHEMA: tuple[ChannelSpec, ...] = (
    ChannelSpec("pitch", "input", "deg"),
    ChannelSpec("roll", "input", "deg"),
    ChannelSpec("yaw", "input", "deg"),
    ChannelSpec("altitude", "input", "ft"),
    ChannelSpec("airspeed", "input", "kt"),
    ChannelSpec("elevator", "output", "deg"),
    ChannelSpec("aileron", "output", "deg"),
    ChannelSpec("rudder", "output", "deg"),
    ChannelSpec("throttle", "output", "fraction"),
    ChannelSpec("flaps", "output", "fraction"),
)


def _check_schema(schema: Sequence[ChannelSpec]) -> tuple[ChannelSpec, ...]:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise TraceError(f"duplicate channel names in schema: {names}")
    if not names:
        raise TraceError("schema has no channels")
    return tuple(schema)


@dataclass(frozen=True, eq=False)
class MultivariateTrace:
    schema: tuple[ChannelSpec, ...]
    samples: np.ndarray
    sample_period: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "schema", _check_schema(self.schema))
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != len(self.schema):
            raise TraceError(
                f"samples must have shape (l_T, {len(self.schema)}), got {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise TraceError("trace contains non-finite values")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.schema)

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.schema]


@dataclass(frozen=True)
class StateCatalog:
    states: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) < 2:
            raise TraceError("a state catalog needs at least two states")
        if len(set(self.states)) != len(self.states):
            raise TraceError(f"duplicate state names: {self.states}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def pad_id(self) -> int:
        """Reserved label for zero-padded steps (outside the catalog)."""
        return len(self.states)

    def index(self, name: str) -> int:
        try:
            return self.states.index(name)
        except ValueError:
            raise TraceError(f"unknown state label {name!r}") from None


@dataclass(frozen=True)
class ChangePointAnnotation:
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        entries = tuple((int(t), int(s)) for t, s in self.entries)
        if not entries:
            raise TraceError("empty annotation")
        if entries[0][0] != 0:
            raise TraceError("annotation must start at t = 0 with the initial state")
        for (t0, s0), (t1, s1) in zip(entries, entries[1:]):
            if t1 <= t0:
                raise TraceError(f"annotation times must increase strictly ({t0} then {t1})")
            if s1 == s0:
                raise TraceError(f"consecutive duplicate state {s0} at t={t1}")
        object.__setattr__(self, "entries", entries)

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.entries]

    @property
    def change_times(self) -> list[int]:
        """Times of actual state changes, i.e. without the t = 0 entry."""
        return [t for t, _ in self.entries[1:]]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class LabelSequence:
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise TraceError("labels must be one-dimensional")
        if self.mask is None:
            mask = np.ones(labels.shape, dtype=bool)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != labels.shape:
                raise TraceError("mask and labels differ in length")
        labels.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mask", mask)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid(self) -> np.ndarray:
        """Labels of the unmasked prefix."""
        return self.labels[: self.n_valid]

    def __eq__(self, other):
        if not isinstance(other, LabelSequence):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class Dataset:
    traces: tuple[tuple[MultivariateTrace, ChangePointAnnotation], ...]
    catalog: StateCatalog
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        traces = tuple(self.traces)
        object.__setattr__(self, "traces", traces)
        names = tuple(self.names) if self.names else tuple(f"flight_{i:04d}" for i in range(len(traces)))
        if len(names) != len(traces):
            raise TraceError("names and traces differ in length")
        object.__setattr__(self, "names", names)
        if traces:
            schema = traces[0][0].schema
            period = traces[0][0].sample_period
            for trace, cp in traces:
                if trace.schema != schema:
                    raise TraceError("inconsistent schema across traces")
                if trace.sample_period != period:
                    raise TraceError("inconsistent sample period across traces")
                if cp.entries[-1][0] >= trace.length:
                    raise TraceError("annotation extends past the end of its trace")
                if max(s for _, s in cp.entries) >= self.catalog.n_states:
                    raise TraceError("annotation uses a state id outside the catalog")

    @property
    def Z(self) -> int:
        return len(self.traces)

    @property
    def L(self) -> int:
        return max((t.length for t, _ in self.traces), default=0)

    @property
    def schema(self) -> tuple[ChannelSpec, ...]:
        return self.traces[0][0].schema

    @property
    def sample_period(self) -> float:
        return self.traces[0][0].sample_period

    def label_sequences(self) -> list[LabelSequence]:
        return [expand_annotation(cp, tr.length) for tr, cp in self.traces]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            traces=tuple(self.traces[i] for i in indices),
            catalog=self.catalog,
            names=tuple(self.names[i] for i in indices),
        )


def expand_annotation(cp: ChangePointAnnotation, length: int) -> LabelSequence:
    """Fill every step with the state of the latest entry at or before it."""
    if not cp.entries:
        raise TraceError("empty annotation")
    if cp.entries[-1][0] >= length:
        raise TraceError(f"entry time {cp.entries[-1][0]} outside a sequence of length {length}")
    labels = np.empty(length, dtype=np.int64)
    bounds = cp.times[1:] + [length]
    for (t, s), end in zip(cp.entries, bounds):
        labels[t:end] = s
    return LabelSequence(labels)


def extract_change_points(seq: LabelSequence) -> ChangePointAnnotation:
    """Inverse of :func:`expand_annotation` on the unmasked prefix."""
    valid = seq.valid()
    if valid.size == 0:
        raise TraceError("sequence is fully masked")
    changes = np.flatnonzero(valid[1:] != valid[:-1]) + 1
    entries = [(0, int(valid[0]))] + [(int(t), int(valid[t])) for t in changes]
    return ChangePointAnnotation(tuple(entries))


def pad_and_mask(
    trace: MultivariateTrace, seq: LabelSequence, length: int, *, pad_id: int
) -> tuple[MultivariateTrace, LabelSequence]:
    """Zero-pad ``trace`` and ``seq`` at the end up to ``length`` steps."""
    l_t = trace.length
    if len(seq) != l_t:
        raise TraceError("trace and label sequence differ in length")
    if l_t > length:
        raise TraceError(f"trace of length {l_t} does not fit into {length} steps")
    extra = length - l_t
    samples = np.concatenate([trace.samples, np.zeros((extra, trace.n_channels))])
    labels = np.concatenate([seq.labels, np.full(extra, pad_id, dtype=np.int64)])
    mask = np.concatenate([seq.mask, np.zeros(extra, dtype=bool)])
    return replace(trace, samples=samples), LabelSequence(labels, mask)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    def apply(self, samples: np.ndarray) -> np.ndarray:
        scale = np.where(self.std < 1e-12, 1.0, self.std)
        return (samples - self.mean) / scale


def channel_stats(dataset: Dataset) -> ChannelStats:
    if dataset.Z == 0:
        raise TraceError("cannot compute statistics of an empty training split")
    stacked = np.concatenate([tr.samples for tr, _ in dataset.traces], axis=0)
    return ChannelStats(stacked.mean(axis=0), stacked.std(axis=0))


def normalize_channels(
    dataset: Dataset, stats: ChannelStats | None = None
) -> tuple[Dataset, ChannelStats]:
    """Per-channel z-score; ``stats`` default to moments of ``dataset`` itself.

    Channels whose standard deviation is below 1e-12 are only mean-shifted.
    """
    if stats is None:
        stats = channel_stats(dataset)
    traces = tuple(
        (replace(tr, samples=stats.apply(tr.samples)), cp) for tr, cp in dataset.traces
    )
    return Dataset(traces, dataset.catalog, dataset.names), stats


def split_dataset(
    dataset: Dataset, fractions: Sequence[float] = (0.9, 0.05, 0.05), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and cut into train/validation/test.

    Validation and test sizes are rounded to nearest; the remainder goes to
    the training split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise TraceError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise TraceError(f"fractions must sum to 1, got {sum(fractions)}")
    z = dataset.Z
    n_val = int(math.floor(fractions[1] * z + 0.5))
    n_test = int(math.floor(fractions[2] * z + 0.5))
    n_train = z - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise TraceError(f"split of {z} traces by {tuple(fractions)} leaves an empty part")
    order = np.random.default_rng(seed).permutation(z)
    train = sorted(order[:n_train].tolist())
    val = sorted(order[n_train : n_train + n_val].tolist())
    test = sorted(order[n_train + n_val :].tolist())
    return dataset.subset(train), dataset.subset(val), dataset.subset(test)


# -- files -------------------------------------------------------------------


def write_trace_csv(path: Path, trace: MultivariateTrace, labels: LabelSequence | None,
                    catalog: StateCatalog | None) -> None:
    header = ["t"] + trace.channel_names + (["state"] if labels is not None else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(trace.length):
            row = [str(t)] + [repr(float(v)) for v in trace.samples[t]]
            if labels is not None:
                row.append(catalog.states[labels.labels[t]])
            writer.writerow(row)


def read_trace_csv(path: Path, schema: Sequence[ChannelSpec], catalog: StateCatalog | None,
                   sample_period: float = 0.2
                   ) -> tuple[MultivariateTrace, ChangePointAnnotation | None]:
    names = [c.name for c in schema]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in ["t"] + names if c not in header]
        if missing:
            raise TraceError(f"{path}: missing columns {missing}")
        cols = [header.index(c) for c in names]
        t_col = header.index("t")
        s_col = header.index("state") if "state" in header else None
        rows, states = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = int(row[t_col])
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise TraceError(f"{path}:{lineno}: non-numeric or missing cell") from None
            if t != len(rows) - 1:
                raise TraceError(f"{path}:{lineno}: time step {t} out of sequence")
            if s_col is not None:
                states.append(row[s_col].strip())
    samples = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    trace = MultivariateTrace(tuple(schema), samples, sample_period)
    if s_col is None or catalog is None:
        return trace, None
    ids = np.array([catalog.index(s) for s in states], dtype=np.int64)
    return trace, extract_change_points(LabelSequence(ids))


def _schema_to_json(schema):
    return [{"name": c.name, "kind": c.kind, "unit": c.unit} for c in schema]


def save_dataset(dataset: Dataset, directory: Path | str, *, min_len: int = DEFAULT_MIN_LEN,
                 max_len: int = DEFAULT_MAX_LEN, extra: dict | None = None) -> Path:
    """Write one CSV per flight plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for name, (trace, cp) in zip(dataset.names, dataset.traces):
        fname = f"{name}.csv"
        write_trace_csv(directory / fname, trace, expand_annotation(cp, trace.length), dataset.catalog)
        files.append(fname)
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_period": dataset.sample_period if dataset.Z else 0.2,
        "schema": _schema_to_json(dataset.schema) if dataset.Z else _schema_to_json(AUTOPILOT_SCHEMA),
        "states": list(dataset.catalog.states),
        "length_bounds": [min_len, max_len],
        "flights": files,
    }
    if extra:
        manifest["generator"] = extra
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path: Path | str, *, min_len: int | None = None,
                 max_len: int | None = None) -> Dataset:
    """Load flights listed in a manifest, dropping those outside the length bounds."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    for key in ("schema", "states", "flights"):
        if key not in manifest:
            raise TraceError(f"{manifest_path}: manifest lacks {key!r}")
    schema = tuple(ChannelSpec(c["name"], c["kind"], c.get("unit", "")) for c in manifest["schema"])
    catalog = StateCatalog(tuple(manifest["states"]))
    period = float(manifest.get("sample_period", 0.2))
    bounds = manifest.get("length_bounds", [DEFAULT_MIN_LEN, DEFAULT_MAX_LEN])
    lo = bounds[0] if min_len is None else min_len
    hi = bounds[1] if max_len is None else max_len
    traces, names, dropped = [], [], 0
    for fname in manifest["flights"]:
        trace, cp = read_trace_csv(manifest_path.parent / fname, schema, catalog, period)
        if cp is None:
            raise TraceError(f"{fname}: labeled dataset file has no state column")
        if not lo <= trace.length <= hi:
            dropped += 1
            continue
        traces.append((trace, cp))
        names.append(Path(fname).stem)
    if dropped:
        logger.info("dropped %d of %d flights outside length bounds [%d, %d]",
                    dropped, len(manifest["flights"]), lo, hi)
    return Dataset(tuple(traces), catalog, tuple(names))
