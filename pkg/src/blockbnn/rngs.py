"""Seed-indexed random streams on the Philox 4x64 counter-based generator.

Every stochastic component derives its generator from an integer seed plus
string/int tags, so rebuilding with the same seed is bit-identical across
platforms and independent of thread scheduling.
"""

from __future__ import annotations

import numpy as np


def stream(*tags) -> np.random.Generator:
    """Generator for the stream named by the given tags."""
    material = [t if isinstance(t, (int, np.integer))
                else int.from_bytes(str(t).encode(), "little")
                for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(material)))
