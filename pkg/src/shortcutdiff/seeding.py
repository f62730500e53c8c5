"""Deterministic seed expansion.

One 64-bit master seed is expanded with splitmix64 into independent
substream seeds, one per named purpose. Each substream seed then feeds a
numpy PCG64 generator. The expansion is fixed so runs are reproducible
from the master seed alone:

    state = master
    for each stream in STREAMS (in declaration order):
        state, sub = splitmix64_next(state)
        stream_seed[stream] = sub
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# Declaration order defines the expansion; do not reorder.
STREAMS = ("data", "training", "noise", "iprime", "fd", "init", "objective")


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state and return (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    z = z ^ (z >> 31)
    return state, z


def substream_seeds(master: int) -> dict[str, int]:
    """Expand a master seed into one 64-bit seed per named stream."""
    if not 0 <= master <= MASK64:
        raise ValueError(f"master seed must be a u64, got {master}")
    state = master
    seeds = {}
    for name in STREAMS:
        state, out = splitmix64_next(state)
        seeds[name] = out
    return seeds


def stream_rng(master: int, name: str) -> np.random.Generator:
    """PCG64 generator for one named substream of a master seed."""
    seeds = substream_seeds(master)
    if name not in seeds:
        raise KeyError(f"unknown stream {name!r}; expected one of {STREAMS}")
    return np.random.Generator(np.random.PCG64(seeds[name]))
