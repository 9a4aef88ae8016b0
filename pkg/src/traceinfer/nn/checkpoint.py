"""Model checkpoints: a JSON manifest plus raw little-endian weight blocks.

Layout of a checkpoint directory::

    manifest.json   version, model config, channel stats, schema, states,
                    training history and an index of the weight arrays
    weights.bin     the arrays back to back, IEEE-754 little-endian
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..trace import ChannelSpec, ChannelStats, StateCatalog
from .model import Model, ModelConfig, build_model

CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: ChannelStats | None = None
    schema: tuple[ChannelSpec, ...] = ()
    states: tuple[str, ...] = ()
    history: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        expected = build_model(self.config, seed=0).params
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise CheckpointError(f"weights do not match the config (missing {missing}, unexpected {extra})")
        for name, arr in expected.items():
            if self.params[name].shape != arr.shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape}, config expects {arr.shape}")
        if self.schema and len(self.schema) != self.config.n_channels:
            raise CheckpointError("schema length differs from the model's channel count")
        if self.states and len(self.states) != self.config.n_states:
            raise CheckpointError("state list length differs from the model's class count")

    @classmethod
    def from_model(cls, model: Model, **kwargs) -> "ModelCheckpoint":
        return cls(model.config, {k: v.copy() for k, v in model.params.items()}, **kwargs)

    @property
    def catalog(self) -> StateCatalog | None:
        return StateCatalog(self.states) if self.states else None

    def to_model(self) -> Model:
        model = build_model(self.config, seed=0)
        model.set_params(self.params)
        return model

    def check_schema(self, schema) -> None:
        if self.schema and tuple(schema) != tuple(self.schema):
            raise CheckpointError(
                f"trace channels {[c.name for c in schema]} do not match the checkpoint's "
                f"{[c.name for c in self.schema]}"
            )

    # -- files ------------------------------------------------------------------

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        offset = 0
        with open(directory / WEIGHTS, "wb") as fh:
            for name in sorted(self.params):
                arr = self.params[name]
                le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                data = np.ascontiguousarray(le).tobytes()
                fh.write(data)
                index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(data)})
                offset += len(data)
        manifest = {
            "version": self.version,
            "config": self.config.to_dict(),
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "schema": [{"name": c.name, "kind": c.kind, "unit": c.unit} for c in self.schema],
            "states": list(self.states),
            "history": self.history,
            "arrays": index,
        }
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "ModelCheckpoint":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / MANIFEST).read_text())
        except FileNotFoundError:
            raise CheckpointError(f"no checkpoint manifest in {directory}") from None
        version = manifest.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version!r}")
        blob = (directory / WEIGHTS).read_bytes()
        params = {}
        for entry in manifest["arrays"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"weight file truncated at {entry['name']}")
            arr = np.frombuffer(blob[entry["offset"] : end], dtype=np.dtype(entry["dtype"]))
            params[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
        stats = ChannelStats.from_dict(manifest["stats"]) if manifest["stats"] else None
        schema = tuple(ChannelSpec(**c) for c in manifest["schema"])
        return cls(ModelConfig.from_dict(manifest["config"]), params, stats, schema,
                   tuple(manifest["states"]), manifest["history"], version)
