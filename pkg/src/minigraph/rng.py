"""Counter-based random numbers.

Every draw is a pure function of an integer key tuple and a per-element
counter, so results do not depend on how work is split across workers or
on the order in which elements are visited.
"""

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64_scalar(x: int) -> int:
    """splitmix64 finalizer on a Python int."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over a uint64 array."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def derive_key(*parts: int) -> int:
    """Fold an arbitrary tuple of non-negative ints into one 64-bit key."""
    k = 0x6A09E667F3BCC908
    for p in parts:
        k = mix64_scalar(k ^ ((int(p) + _GOLDEN) & MASK64))
    return k


def hash_counters(key: int, counters) -> np.ndarray:
    """One uint64 per counter, keyed by ``key`` (an int or a uint64 array)."""
    c = np.asarray(counters).astype(np.uint64, copy=False)
    k = np.asarray(key, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(c * np.uint64(_GOLDEN) + k)


def hash_counter_scalar(key: int, counter: int) -> int:
    return mix64_scalar((counter * _GOLDEN + key) & MASK64)


def uniform(key: int, counters) -> np.ndarray:
    """Uniform doubles in [0, 1) with 53 random bits."""
    h = hash_counters(key, counters)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(*parts: int) -> np.random.Generator:
    """A numpy Generator seeded from a key tuple, for non-counter uses."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
