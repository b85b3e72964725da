"""Deterministic seed derivation.

All randomness in the package flows from a single u64 root seed. Child
seeds are derived with a splitmix64 mix over the root and a sequence of
string/int tokens, so independent decisions (e.g. "episode 17, query 3,
mixing partner") get independent, reproducible streams without any global
RNG state.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (Steele et al. finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def _token_to_int(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & _MASK
    if isinstance(token, str):
        h = 0xCBF29CE484222325  # FNV-1a over UTF-8
        for b in token.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK
        return h
    raise TypeError(f"seed tokens must be int or str, got {type(token).__name__}")


def derive(seed: int, *tokens) -> int:
    """Derive a child seed from a root seed and a path of tokens."""
    h = int(seed) & _MASK
    for token in tokens:
        h = splitmix64(h ^ _token_to_int(token))
    return h


def generator(seed: int, *tokens) -> np.random.Generator:
    """PCG64 generator seeded from derive(seed, *tokens)."""
    return np.random.Generator(np.random.PCG64(derive(seed, *tokens)))


_GOLDEN64 = 0x9E3779B97F4A7C15


class SmallRng:
    """Counter-based splitmix64 stream for cheap uniform draws.

    Much faster to construct than a numpy Generator, which matters when
    thousands of augmentation events each need their own seeded stream.
    Only uniform-flavoured draws are provided; anything with a non-trivial
    distribution goes through numpy.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int, *tokens):
        self._state = derive(seed, *tokens) if tokens else int(seed) & _MASK

    def _next(self) -> int:
        self._state = (self._state + _GOLDEN64) & _MASK
        x = self._state
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
        return (x ^ (x >> 31)) & _MASK

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self._next() >> 11) * (2.0 ** -53))

    def integers(self, lo: int, hi: int | None = None) -> int:
        """Uniform integer in [lo, hi) (or [0, lo) when hi is omitted)."""
        if hi is None:
            lo, hi = 0, lo
        span = hi - lo
        if span < 1:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        return lo + ((self._next() * span) >> 64)

    def distinct(self, n: int, k: int) -> list[int]:
        """k distinct integers from [0, n), uniform, order random."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        arr = list(range(n))
        for i in range(k):
            j = self.integers(i, n)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k]
