"""Seed derivation so per-patient work is reproducible regardless of order."""
import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator seeded from ``seed`` plus any mix of ints and strings."""
    return np.random.default_rng([_key_int(seed), *(_key_int(k) for k in keys)])


def top_fraction_threshold(scores, fraction: float) -> float:
    """Threshold that keeps the top ``fraction`` of ``scores``.

    Ranks scores in descending order and returns the smallest score whose rank
    is at most ``floor(n * fraction)`` (at least one item is always kept).
    Callers keep every score ``>= threshold``, so ties at the threshold are all
    retained.
    """
    values = np.sort(np.asarray(scores, dtype=float))[::-1]
    if values.size == 0:
        raise ValueError("cannot threshold an empty score list")
    m = int(np.floor(values.size * fraction + 1e-9))
    m = min(max(m, 1), values.size)
    return float(values[m - 1])
