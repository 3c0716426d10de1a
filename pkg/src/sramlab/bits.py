"""Fixed-length power-up patterns and the Hamming primitives built on them.

Bit ``i`` of a pattern lives in byte ``i // 8`` at bit position ``i % 8``
(little-endian within each byte). Trailing pad bits of the last byte are
always zero, so byte-level popcounts never see them.
"""
from __future__ import annotations

import base64
import binascii

import numpy as np

DEFAULT_N = 8192


class LengthMismatchError(ValueError):
    """Two patterns (or a pattern and a sample set) disagree on length."""


class PatternDecodeError(ValueError):
    """A serialized payload does not decode to a pattern of the stated length."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def pack_bits(bits) -> np.ndarray:
    """Pack a 0/1 sequence (or a 2-D matrix, row-wise) into little-endian bytes."""
    arr = np.asarray(bits)
    if arr.dtype != np.bool_:
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("pattern bits must be 0 or 1")
        arr = arr.astype(np.bool_)
    return np.packbits(arr, axis=-1, bitorder="little")


def unpack_bits(packed: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(packed, axis=-1, count=n, bitorder="little")


class PowerUpPattern:
    """One immutable SRAM read-out.

    Construct from bits with ``PowerUpPattern(bits)`` or from serialized
    bytes with :meth:`from_bytes` / :meth:`from_base64` / :meth:`from_hex`.
    """

    __slots__ = ("_packed", "_n")

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("a pattern is a non-empty 1-D bit sequence")
        self._n = int(arr.size)
        self._packed = _readonly(pack_bits(arr))

    @classmethod
    def _from_packed(cls, packed: np.ndarray, n: int) -> "PowerUpPattern":
        obj = cls.__new__(cls)
        obj._n = int(n)
        obj._packed = _readonly(np.array(packed, dtype=np.uint8, copy=True))
        return obj

    @classmethod
    def from_bytes(cls, data: bytes, n: int) -> "PowerUpPattern":
        if n <= 0:
            raise PatternDecodeError("n must be positive")
        nbytes = (n + 7) // 8
        if len(data) != nbytes:
            raise PatternDecodeError(f"expected {nbytes} bytes for n={n}, got {len(data)}")
        packed = np.frombuffer(data, dtype=np.uint8)
        if n % 8 and packed[-1] >> (n % 8):
            raise PatternDecodeError("non-zero pad bits beyond n")
        return cls._from_packed(packed, n)

    @classmethod
    def from_base64(cls, text: str, n: int) -> "PowerUpPattern":
        try:
            raw = base64.b64decode(text, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise PatternDecodeError(f"invalid base64 payload: {exc}") from None
        return cls.from_bytes(raw, n)

    @classmethod
    def from_hex(cls, text: str, n: int) -> "PowerUpPattern":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise PatternDecodeError(f"invalid hex payload: {exc}") from None
        return cls.from_bytes(raw, n)

    @classmethod
    def zeros(cls, n: int = DEFAULT_N) -> "PowerUpPattern":
        return cls(np.zeros(n, dtype=np.uint8))

    @classmethod
    def ones(cls, n: int = DEFAULT_N) -> "PowerUpPattern":
        return cls(np.ones(n, dtype=np.uint8))

    @property
    def n(self) -> int:
        return self._n

    @property
    def packed(self) -> np.ndarray:
        """Read-only little-endian packed bytes (length ceil(n/8))."""
        return self._packed

    @property
    def bits(self) -> np.ndarray:
        return _readonly(unpack_bits(self._packed, self._n))

    def to_bytes(self) -> bytes:
        return self._packed.tobytes()

    def to_base64(self) -> str:
        return base64.b64encode(self._packed.tobytes()).decode("ascii")

    def to_hex(self) -> str:
        return self._packed.tobytes().hex()

    def complement(self) -> "PowerUpPattern":
        flipped = np.bitwise_not(self._packed)
        if self._n % 8:
            flipped[-1] &= (1 << (self._n % 8)) - 1
        return PowerUpPattern._from_packed(flipped, self._n)

    def count_ones(self) -> int:
        return int(np.bitwise_count(self._packed).sum())

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> int:
        if not -self._n <= i < self._n:
            raise IndexError(i)
        i %= self._n
        return int(self._packed[i >> 3] >> (i & 7)) & 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, PowerUpPattern):
            return NotImplemented
        return self._n == other._n and np.array_equal(self._packed, other._packed)

    def __hash__(self) -> int:
        return hash((self._n, self._packed.tobytes()))

    def __repr__(self) -> str:
        return f"PowerUpPattern(n={self._n}, hw={self.count_ones()})"


def _check_same_length(a: PowerUpPattern, b: PowerUpPattern) -> None:
    if a.n != b.n:
        raise LengthMismatchError(f"pattern lengths differ: {a.n} != {b.n}")


def hamming_distance(a: PowerUpPattern, b: PowerUpPattern) -> int:
    """Number of positions where ``a`` and ``b`` differ."""
    _check_same_length(a, b)
    return int(np.bitwise_count(np.bitwise_xor(a.packed, b.packed)).sum())


def fractional_hd(a: PowerUpPattern, b: PowerUpPattern) -> float:
    return hamming_distance(a, b) / a.n


def fractional_hw(a: PowerUpPattern) -> float:
    return a.count_ones() / a.n
