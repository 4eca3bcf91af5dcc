"""Keyed random-number streams for reproducible parallel simulation.

Every random draw in the simulator comes from a generator derived from
(seed, *path), where the path encodes what the stream is for and which
client/round it belongs to. Streams are therefore independent of scheduling:
two runs with different worker counts consume exactly the same numbers.
"""

from __future__ import annotations

import numpy as np

# Stream purpose tags; (seed, tag, *indices) names one independent stream.
DATA = 0
PARTITION = 1
SPLIT = 2
MODEL_INIT = 3
GUIDE_INIT = 4
PARTICIPATION = 5
EPOCH = 6
BATCH = 7
NOISE = 8


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator keyed by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=path))
