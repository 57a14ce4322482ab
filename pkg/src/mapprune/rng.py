"""Named random streams derived from one 64-bit seed.

Stream ``name`` uses ``SeedSequence(entropy=seed, spawn_key=(STREAMS.index(name),))``,
so every stream is independent of the others and adding draws to one stream
never shifts another. Criteria compared under the same seed therefore see
identical initialisation, shuffling and data.
"""
from __future__ import annotations

import numpy as np

STREAMS = ("init", "shuffle", "synth_train", "synth_test", "probes", "random_criterion")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    key = (STREAMS.index(name),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
