"""Named random sub-streams derived from a single master seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> int:
    """Derive an integer seed for the stream ``name`` from the master seed.

    Streams with different names are statistically independent and each one is
    reproducible on its own, e.g. ``substream(7, "bootstrap/0.5")``.
    """
    sequence = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def spawn_generators(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators for ``count`` parallel jobs (starts, replicates)."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]
