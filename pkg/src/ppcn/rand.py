"""Deterministic RNG streams.

All randomness in the package flows through numpy SeedSequence spawning:
a root seed plus a small integer key tuple fully determines a stream, so
independent consumers (scene geometry, sensor noise, weight init, epoch
shuffling) never share or race a generator. The stream keys below are
part of the reproducibility contract; changing them changes every run.
"""

from __future__ import annotations

import numpy as np

STREAM_SCENE = 0
STREAM_NOISE = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def child_seed(seed: int, *key: int) -> int:
    """A derived integer seed, for APIs that take a seed rather than a stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
