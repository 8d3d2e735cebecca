"""Deterministic RNG construction from integer seed paths."""

import numpy as np


def seeded_rng(*entropy: int) -> np.random.Generator:
    """Build a generator from a seed plus integer sub-keys.

    Distinct key paths yield independent streams, and the same path always
    yields the same stream, so every stochastic step in the library is a
    pure function of the seeds recorded in its configuration.
    """
    words = [int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy]
    return np.random.default_rng(np.random.SeedSequence(words))
