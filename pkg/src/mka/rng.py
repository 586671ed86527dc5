"""Platform-independent pseudo-random streams.

SplitMix64 (Steele, Lea & Flood 2014) drives every seeded draw in the package so
workloads, gate initialisations and LSH hyperplanes are identical across numpy
versions and machines. The n-th output of a stream seeded with ``s`` is
``mix(s + (n + 1) * GOLDEN)``, which makes the stream trivially vectorisable.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Return outputs ``offset .. offset + n - 1`` of the SplitMix64 stream for ``seed``."""
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK64) + idx * GOLDEN
        return _mix(state)


def uniform(seed: int, shape, low: float = 0.0, high: float = 1.0, offset: int = 0) -> np.ndarray:
    """Doubles in ``[low, high)`` built from the top 53 bits of each draw."""
    shape = _as_shape(shape)
    n = int(np.prod(shape, dtype=np.int64))
    bits = splitmix64(seed, n, offset) >> np.uint64(11)
    u = bits.astype(np.float64) * (1.0 / (1 << 53))
    return (low + (high - low) * u).reshape(shape)


def normal(seed: int, shape, offset: int = 0) -> np.ndarray:
    """Standard normal draws via Box-Muller on pairs of uniforms."""
    shape = _as_shape(shape)
    n = int(np.prod(shape, dtype=np.int64))
    m = (n + 1) // 2
    u = uniform(seed, (2 * m,), offset=offset)
    u1 = 1.0 - u[:m]  # (0, 1]
    u2 = u[m:]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return out[:n].reshape(shape)


def derive(seed: int, *tags: int) -> int:
    """Derive an independent child seed from ``seed`` and integer tags."""
    s = seed & _MASK64
    for tag in tags:
        s = int(splitmix64(s ^ (tag & _MASK64), 1)[0])
    return s
