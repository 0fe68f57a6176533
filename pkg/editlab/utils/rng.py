"""Counter-based seeded generators.

Every random draw in the lab comes from a generator keyed by the experiment
seed plus a tuple of integer stream tags (timestep, trial index, grid cell...),
so results never depend on the order in which draws are made.
"""

from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1

# Stream tags; the first tag after the seed names the consumer.
STREAM_FORWARD_NOISE = 1
STREAM_PROJECTION = 2
STREAM_SOURCE = 3
STREAM_CALIBRATION = 4
STREAM_TRIAL = 5
STREAM_PROBE = 6
STREAM_POWER = 7
STREAM_CELL = 8


def noise_generator(seed: int, *stream: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *stream)``."""
    entropy = [int(seed) & SEED_MASK, *(int(s) & SEED_MASK for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream: int) -> int:
    """64-bit child seed for ``(seed, *stream)``."""
    entropy = [int(seed) & SEED_MASK, *(int(s) & SEED_MASK for s in stream)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Uniformly distributed direction on the unit sphere."""
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm == 0.0:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return v / norm
