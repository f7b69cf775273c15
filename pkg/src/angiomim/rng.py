"""Seeded, splittable random streams.

Every stochastic decision draws from a generator keyed by a tuple of
integers, e.g. ``(seed, image_index, epoch)``.  Workers that own different
keys therefore reproduce single-threaded output exactly.
"""

import numpy as np

# Stream tags keep unrelated uses of the same (seed, ...) key apart.
MASKING = 1
SHUFFLE = 2
INIT = 3
SYNTH = 4
GRADCHECK = 5
SPLIT = 6


def stream(seed, *key):
    """A fresh PCG64 generator for the integer key ``(seed, *key)``."""
    words = [int(seed)] + [int(k) for k in key]
    if any(w < 0 for w in words):
        raise ValueError(f"stream keys must be non-negative, got {words}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def as_generator(rng):
    """Accept a Generator, an int seed, or None (seed 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng)
