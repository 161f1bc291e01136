"""Spatial permutation keys and their deterministic generation.

A key is a bijection on an h x w pixel grid stored in gather form: entry q of
the map names the source pixel for output position q (``shuffled[q] =
original[map[q]]``). Generation is pinned to splitmix64 driving a descending
Fisher-Yates shuffle so that the same (height, width, seed) always produces
the same key on any conforming implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParameterError

__all__ = [
    "PermKey",
    "KeyChain",
    "SplitMix64",
    "generate_key",
    "identity_key",
    "invert_key",
    "derive_layer_key",
]

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """The splitmix64 sequence; 64-bit state, 64-bit outputs."""

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


@dataclass(frozen=True, eq=False)
class PermKey:
    """Bijection on an height x width grid, gather form (map[q] = source index)."""

    height: int
    width: int
    map: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ParameterError(
                f"key grid must be at least 1x1, got {self.height}x{self.width}"
            )
        m = np.ascontiguousarray(self.map, dtype=np.int64)
        n = self.height * self.width
        if m.shape != (n,):
            raise IntegrityError(
                f"key map must have {n} entries for a {self.height}x{self.width} "
                f"grid, got shape {m.shape}"
            )
        if m.min(initial=0) < 0 or m.max(initial=-1) >= n:
            raise IntegrityError("key map entry out of range")
        counts = np.bincount(m, minlength=n)
        if counts.max(initial=0) > 1:
            dup = int(np.flatnonzero(counts > 1)[0])
            raise IntegrityError(f"key map is not a bijection: duplicate source index {dup}")
        m.flags.writeable = False
        object.__setattr__(self, "map", m)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.map, np.arange(self.map.size)))

    def source(self, i: int, j: int) -> tuple[int, int]:
        """Plain-grid (row, col) that output position (i, j) is taken from."""
        q = int(self.map[i * self.width + j])
        return divmod(q, self.width)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermKey):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.map, other.map)


@dataclass
class KeyChain:
    """Per-stage keys for a keyed network: input key first, then one per
    conv/pool output."""

    entries: list[PermKey] = field(default_factory=list)
    session_seed: int = 0


def generate_key(height: int, width: int, seed: int) -> PermKey:
    """Deterministic random key for an height x width grid.

    Fisher-Yates over [0 .. h*w-1], walking i from the top down; the swap
    index at step i is the next splitmix64 output reduced modulo (i+1).
    """
    if height < 1 or width < 1:
        raise ParameterError(f"key grid must be at least 1x1, got {height}x{width}")
    n = height * width
    perm = np.arange(n, dtype=np.int64)
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return PermKey(height, width, perm)


def identity_key(height: int, width: int) -> PermKey:
    return PermKey(height, width, np.arange(height * width, dtype=np.int64))


def invert_key(key: PermKey) -> PermKey:
    """Inverse bijection: result.map[key.map[q]] == q for all q."""
    inv = np.empty_like(key.map)
    inv[key.map] = np.arange(key.map.size, dtype=np.int64)
    return PermKey(key.height, key.width, inv)


def derive_layer_key(session_seed: int, ordinal: int, height: int, width: int) -> PermKey:
    """Key for one network stage: generate_key seeded with session_seed XOR ordinal."""
    return generate_key(height, width, (session_seed ^ ordinal) & _MASK64)
