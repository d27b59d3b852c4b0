from __future__ import annotations

import numpy as np


def _entropy(parts: tuple[int, ...]) -> list[int]:
    words = [int(p) for p in parts]
    if any(w < 0 for w in words):
        raise ValueError("seed components must be non-negative integers")
    return words


def rng_for(*parts: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``parts`` (e.g. seed, rep)."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(parts)))


def derive_seed(*parts: int) -> int:
    """Child integer seed for the stream identified by ``parts``."""
    return int(np.random.SeedSequence(_entropy(parts)).generate_state(1, dtype=np.uint32)[0])
