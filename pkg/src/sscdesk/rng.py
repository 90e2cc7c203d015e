"""Seeded randomness. All randomness in the package flows through here."""
import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; ``stream`` selects an independent key."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=[seed, int(stream)]))
