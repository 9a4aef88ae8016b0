"""Named random sub-streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the stream ``name`` (e.g. ``"split"``, ``"init"``) of ``seed``.

    Streams with different names are statistically independent, and adding
    a new stream never shifts the draws of existing ones.
    """
    return np.random.default_rng(substream_seed(seed, name))


def substream_int(seed: int, name: str) -> int:
    """A 32-bit integer seed for APIs that want a plain int."""
    return int(substream_seed(seed, name).generate_state(1)[0])
