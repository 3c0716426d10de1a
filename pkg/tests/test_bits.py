import numpy as np
import pytest

from sramlab.bits import (
    LengthMismatchError,
    PatternDecodeError,
    PowerUpPattern,
    fractional_hd,
    fractional_hw,
    hamming_distance,
    pack_bits,
)


def test_little_endian_bit_order():
    # bytes 0xAB 0x2B, n=16, base64 "qys="
    p = PowerUpPattern.from_base64("qys=", 16)
    assert p.bits.tolist() == [1, 1, 0, 1, 0, 1, 0, 1, 1, 1, 0, 1, 0, 1, 0, 0]
    assert p.to_hex() == "ab2b"
    assert p[0] == 1 and p[2] == 0 and p[15] == 0 and p[-1] == 0


def test_round_trips():
    rng = np.random.default_rng(3)
    for n in (1, 7, 8, 9, 64, 8192):
        bits = rng.integers(0, 2, n)
        p = PowerUpPattern(bits)
        assert PowerUpPattern.from_bytes(p.to_bytes(), n) == p
        assert PowerUpPattern.from_base64(p.to_base64(), n) == p
        assert PowerUpPattern.from_hex(p.to_hex(), n) == p
        assert p.bits.tolist() == bits.tolist()


def test_pad_bits_zero_and_rejected():
    p = PowerUpPattern.ones(10)
    assert p.packed.tolist() == [0xFF, 0x03]
    assert p.complement() == PowerUpPattern.zeros(10)
    with pytest.raises(PatternDecodeError):
        PowerUpPattern.from_bytes(bytes([0xFF, 0x07]), 10)


def test_decode_errors():
    with pytest.raises(PatternDecodeError):
        PowerUpPattern.from_bytes(b"\x00", 16)
    with pytest.raises(PatternDecodeError):
        PowerUpPattern.from_base64("not base64!", 16)
    with pytest.raises(PatternDecodeError):
        PowerUpPattern.from_hex("zz", 8)


def test_patterns_are_immutable():
    p = PowerUpPattern([1, 0, 1])
    with pytest.raises(ValueError):
        p.packed[0] = 0
    with pytest.raises(ValueError):
        p.bits[0] = 0


def test_hamming_primitives():
    a = PowerUpPattern([1, 1, 0, 0, 1])
    b = PowerUpPattern([1, 0, 1, 0, 1])
    assert hamming_distance(a, b) == 2
    assert fractional_hd(a, b) == pytest.approx(0.4)
    assert fractional_hw(a) == pytest.approx(0.6)
    assert hamming_distance(a, a.complement()) == 5
    with pytest.raises(LengthMismatchError):
        hamming_distance(a, PowerUpPattern([1, 0]))


def test_pack_rejects_non_binary():
    with pytest.raises(ValueError):
        pack_bits([0, 2, 1])
