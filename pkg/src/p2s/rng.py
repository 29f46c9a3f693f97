"""Seed derivation: every run owns one root seed, sub-streams are spawned by purpose.

The rule is fixed so results are reproducible from a single integer:
``stream(seed, purpose)`` builds ``PCG64(SeedSequence(seed, spawn_key=(code,)))``
where ``code`` is the purpose's entry below.  Extra integers (e.g. a benchmark
cell index) extend the spawn key after the purpose code.
"""

from __future__ import annotations

import numpy as np

PURPOSE_CODES = {
    "noise": 0,
    "weights": 1,
    "pairs": 2,
    "probe": 3,
    "bench": 4,
}


def _sequence(seed: int, purpose: str, extra: tuple[int, ...]) -> np.random.SeedSequence:
    try:
        code = PURPOSE_CODES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}") from None
    return np.random.SeedSequence(int(seed), spawn_key=(code, *map(int, extra)))


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Deterministic per-purpose random stream derived from one root seed."""
    return np.random.Generator(np.random.PCG64(_sequence(seed, purpose, extra)))


def derive_seed(seed: int, purpose: str, *extra: int) -> int:
    """Collapse a sub-stream into a plain integer seed (for child runs)."""
    return int(_sequence(seed, purpose, extra).generate_state(1)[0])
