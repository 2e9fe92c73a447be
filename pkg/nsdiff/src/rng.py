"""Seeded random substreams.

One master seed fans out into independent generators keyed by purpose, so
ablations that share a seed also share their initial weights and batch order.
"""
from typing import Tuple

import numpy as np

INIT = 0
SHUFFLE = 1
TIMESTEP = 2
NOISE = 3
SAMPLE = 4
SYNTH = 5

# Sub-keys of INIT, one per network.
F_PHI = 0
G_PSI = 1
XI_THETA = 2


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by `key` under the master `seed`."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


def path_streams(seed: int, chunk: int, paths: int) -> Tuple[np.random.Generator, ...]:
    """One generator per sample path for a given sampling chunk."""
    return tuple(substream(seed, SAMPLE, chunk, s) for s in range(paths))
