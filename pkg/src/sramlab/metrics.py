"""Reliability, uniqueness and randomness statistics over power-up patterns.

All functions are pure: they read patterns and sample sets and never mutate
them, so per-device and per-epoch evaluations can run concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .bits import LengthMismatchError, PowerUpPattern, fractional_hd, pack_bits, unpack_bits

DEFAULT_WINDOW = 1000


class EmptySampleSetError(ValueError):
    pass


class NotEnoughReferencesError(ValueError):
    pass


class UndefinedRateError(ValueError):
    """A rate of change was requested relative to a zero start value."""


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Consecutive read-outs of one device in one evaluation epoch.

    ``packed`` is a read-only ``(count, ceil(n/8))`` uint8 matrix, one packed
    pattern per row in measurement order.
    """

    device: str
    epoch: int
    n: int
    packed: np.ndarray
    first_seq: int | None = None

    def __post_init__(self):
        packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if packed.ndim != 2 or packed.shape[1] != (self.n + 7) // 8:
            raise ValueError(f"packed matrix shape {packed.shape} does not fit n={self.n}")
        packed.flags.writeable = False
        object.__setattr__(self, "packed", packed)

    @classmethod
    def from_patterns(cls, patterns: Sequence[PowerUpPattern], device: str = "", epoch: int = 0,
                      first_seq: int | None = None) -> "SampleSet":
        if not patterns:
            raise EmptySampleSetError("a sample set needs at least one pattern")
        n = patterns[0].n
        for p in patterns:
            if p.n != n:
                raise LengthMismatchError(f"pattern lengths differ: {p.n} != {n}")
        return cls(device, epoch, n, np.stack([p.packed for p in patterns]), first_seq)

    @classmethod
    def from_bits(cls, bits, device: str = "", epoch: int = 0, first_seq: int | None = None) -> "SampleSet":
        arr = np.asarray(bits)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise EmptySampleSetError("bit matrix must be (count >= 1, n >= 1)")
        return cls(device, epoch, arr.shape[1], pack_bits(arr), first_seq)

    @property
    def count(self) -> int:
        return self.packed.shape[0]

    def __len__(self) -> int:
        return self.count

    def pattern(self, i: int) -> PowerUpPattern:
        return PowerUpPattern._from_packed(self.packed[i], self.n)

    @property
    def patterns(self) -> list[PowerUpPattern]:
        return [self.pattern(i) for i in range(self.count)]

    def bit_matrix(self) -> np.ndarray:
        return unpack_bits(self.packed, self.n)


@dataclass(frozen=True, eq=False)
class OneProbabilityVector:
    """Per-cell 1-counts over ``support`` measurements; ``p`` is ``ones / support``."""

    ones: np.ndarray
    support: int
    p: np.ndarray = field(init=False)

    def __post_init__(self):
        ones = np.asarray(self.ones, dtype=np.int64)
        if self.support < 1:
            raise EmptySampleSetError("support must be at least 1")
        if ones.ndim != 1 or ones.size == 0:
            raise ValueError("ones must be a non-empty 1-D count vector")
        if (ones < 0).any() or (ones > self.support).any():
            raise ValueError("1-counts must lie in [0, support]")
        ones.flags.writeable = False
        p = ones / self.support
        p.flags.writeable = False
        object.__setattr__(self, "ones", ones)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.ones.size


def _popcount_rows(packed: np.ndarray) -> np.ndarray:
    return np.bitwise_count(packed).sum(axis=-1, dtype=np.int64)


def wchd(reference: PowerUpPattern, samples: SampleSet) -> np.ndarray:
    """Fractional distance of every sample to ``reference``, in sample order."""
    if reference.n != samples.n:
        raise LengthMismatchError(f"reference n={reference.n} but samples n={samples.n}")
    return _popcount_rows(np.bitwise_xor(samples.packed, reference.packed)) / samples.n


def bchd(references: Sequence[PowerUpPattern]) -> list[float]:
    """Fractional distance for each unordered pair of distinct devices.

    Pairs are ordered as ``itertools.combinations(range(k), 2)``.
    """
    if len(references) < 2:
        raise NotEnoughReferencesError("between-class distance needs at least 2 references")
    return [fractional_hd(a, b) for a, b in combinations(references, 2)]


def hamming_weights(samples: SampleSet) -> np.ndarray:
    return _popcount_rows(samples.packed) / samples.n


def one_probability(samples: SampleSet) -> OneProbabilityVector:
    if samples.count < 1:
        raise EmptySampleSetError("empty sample set")
    ones = samples.bit_matrix().sum(axis=0, dtype=np.int64)
    return OneProbabilityVector(ones, samples.count)


def stable_cell_ratio(p: OneProbabilityVector) -> float:
    # exact count test: stable iff never or always 1
    stable = np.count_nonzero((p.ones == 0) | (p.ones == p.support))
    return stable / p.n


def _min_entropy_from_counts(major: np.ndarray, total: int) -> float:
    # -log2(max/total) averaged; max == total contributes exactly 0
    per_cell = np.log2(total) - np.log2(major.astype(np.float64))
    return float(np.mean(per_cell))


def noise_min_entropy(p: OneProbabilityVector) -> float:
    major = np.maximum(p.ones, p.support - p.ones)
    return _min_entropy_from_counts(major, p.support)


def puf_min_entropy(references: Sequence[PowerUpPattern]) -> float:
    """Average min-entropy per bit position, probabilities taken across devices."""
    k = len(references)
    if k < 2:
        raise NotEnoughReferencesError("PUF entropy needs at least 2 references")
    n = references[0].n
    for r in references:
        if r.n != n:
            raise LengthMismatchError(f"pattern lengths differ: {r.n} != {n}")
    ones = unpack_bits(np.stack([r.packed for r in references]), n).sum(axis=0, dtype=np.int64)
    return _min_entropy_from_counts(np.maximum(ones, k - ones), k)


def relative_change(start: float, end: float) -> float:
    if start == 0:
        raise UndefinedRateError("relative change from a zero start value")
    return (end - start) / start


def monthly_change(start: float, end: float, months: int) -> float:
    """Compound monthly rate ``(end/start)**(1/months) - 1``."""
    if start <= 0:
        raise UndefinedRateError(f"rate undefined for start={start}")
    if months < 1:
        raise ValueError("months must be >= 1")
    if end < 0:
        raise ValueError("end must be non-negative")
    if end == 0:
        return -1.0
    return math.expm1(math.log(end / start) / months)
