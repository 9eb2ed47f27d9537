"""Bit-level checks for the binary16 emulation.

The reference oracle is numpy's float16, an independent RNE
implementation; the scalar routines here never call it.
"""

import math
import struct
import time

import numpy as np
import pytest

from reidmx.half import (EXP_MASK, MAX_FINITE, MIN_NORMAL, MIN_SUBNORMAL,
                         POS_INF_BITS, QNAN_BITS, SIG_MASK, Half16,
                         count_flushed, f16_arith, f16_to_f32, f32_to_f16,
                         float_to_half_bits, half_bits_to_float, is_f16_exact,
                         quantize_f16)


def ref_bits(x: float) -> int:
    """numpy's conversion, as a raw pattern."""
    return int(np.float32(x).astype(np.float16).view(np.uint16))


def test_roundtrip_all_finite_patterns():
    start = time.perf_counter()
    checked = 0
    for bits in range(0x10000):
        if bits & EXP_MASK == EXP_MASK:
            continue  # inf / NaN exponent
        value = half_bits_to_float(bits)
        assert float_to_half_bits(value) == bits
        checked += 1
    assert checked == 63488
    assert time.perf_counter() - start < 10.0


def test_decode_matches_reference_everywhere():
    all_bits = np.arange(0x10000, dtype=np.uint16)
    ref = all_bits.view(np.float16).astype(np.float64)
    for bits in range(0x10000):
        mine = half_bits_to_float(bits)
        theirs = float(ref[bits])
        if math.isnan(theirs):
            assert math.isnan(mine)
        else:
            assert mine == theirs
            # signed zero must survive decoding
            assert math.copysign(1.0, mine) == math.copysign(1.0, theirs)


def test_encode_matches_reference_on_million_random():
    rng = np.random.default_rng(2024)
    # mix wide-exponent randoms with near-boundary magnitudes; everything
    # is binary32-exact so the reference sees the identical input
    raw = rng.integers(0, 2 ** 32, size=900_000, dtype=np.uint64).astype(np.uint32)
    vals = raw.view(np.float32)
    boundary = rng.uniform(-70000, 70000, size=50_000).astype(np.float32)
    tiny = rng.uniform(-1e-3, 1e-3, size=50_000).astype(np.float32)
    vals = np.concatenate([vals, boundary, tiny])
    assert vals.size == 1_000_000
    with np.errstate(over="ignore"):
        ref = vals.astype(np.float16).view(np.uint16)
    start = time.perf_counter()
    with np.errstate(invalid="ignore"):  # the sample includes signaling NaNs
        wide = vals.astype(np.float64)
    for x, want in zip(wide.tolist(), ref.tolist()):
        got = float_to_half_bits(x)
        if math.isnan(x):
            assert got == QNAN_BITS
        else:
            assert got == want, f"{x!r}: {got:#06x} != {want:#06x}"
    assert time.perf_counter() - start < 10.0


def test_encode_from_float64_single_rounding():
    # the scalar routine rounds binary64 -> binary16 in one step; values
    # that would double-round through binary32 must not be affected
    rng = np.random.default_rng(11)
    vals = rng.uniform(-70000, 70000, size=100_000)
    with np.errstate(over="ignore"):
        ref = vals.astype(np.float16).view(np.uint16)
    for x, want in zip(vals.tolist(), ref.tolist()):
        assert float_to_half_bits(x) == want
    x = 7906.000038113867  # f32 would collapse this onto the 7906 tie point
    assert float_to_half_bits(x) == int(np.array([x]).astype(np.float16).view(np.uint16)[0])


def test_worked_examples():
    assert float_to_half_bits(65504.0) == 0x7BFF
    assert float_to_half_bits(65520.0) == POS_INF_BITS
    assert float_to_half_bits(-65520.0) == POS_INF_BITS | 0x8000
    assert float_to_half_bits(2.0 ** -25) == 0x0000  # tie rounds to even zero
    assert float_to_half_bits(-(2.0 ** -25)) == 0x8000
    assert float_to_half_bits(2.0 ** -24) == 0x0001
    assert half_bits_to_float(0x0001) == 2.0 ** -24
    assert MAX_FINITE == 65504.0 and MIN_NORMAL == 2.0 ** -14
    assert MIN_SUBNORMAL == 2.0 ** -24
    assert f32_to_f16(2049.0).to_float() == 2048.0
    assert f32_to_f16(2051.0).to_float() == 2052.0  # tie, odd side loses


def test_nan_canonicalization():
    assert float_to_half_bits(float("nan")) == QNAN_BITS
    payload_nan = struct.unpack("<d", struct.pack("<Q", 0x7FF8DEADBEEF0000))[0]
    assert float_to_half_bits(payload_nan) == QNAN_BITS
    assert math.isnan(half_bits_to_float(0x7C01))
    assert math.isnan(half_bits_to_float(0xFE00))


def test_rounding_error_bound():
    # normal range: relative error of one rounding is at most 2^-11
    rng = np.random.default_rng(5)
    xs = rng.uniform(-60000, 60000, size=20_000)
    xs = xs[np.abs(xs) >= MIN_NORMAL]
    for x in xs.tolist():
        q = half_bits_to_float(float_to_half_bits(x))
        assert abs(q - x) <= abs(x) * 2.0 ** -11


def test_conversion_monotone():
    rng = np.random.default_rng(6)
    xs = np.sort(rng.uniform(-70000, 70000, size=10_000))
    prev = -math.inf
    for x in xs.tolist():
        q = half_bits_to_float(float_to_half_bits(x))
        assert q >= prev
        prev = q


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_arithmetic_matches_reference(op):
    rng = np.random.default_rng(hash(op) % 2 ** 32)
    raw = rng.integers(0, 0x10000, size=(4000, 2), dtype=np.uint16)
    a16 = raw[:, 0].view(np.float16)
    b16 = raw[:, 1].view(np.float16)
    with np.errstate(all="ignore"):
        want = {"add": a16 + b16, "sub": a16 - b16,
                "mul": a16 * b16, "div": a16 / b16}[op]
    for av, bv, wv in zip(a16.tolist(), b16.tolist(), want.tolist()):
        got = f16_arith(op, av, bv)
        if math.isnan(wv):
            assert math.isnan(got)
        else:
            assert got == wv
            assert math.copysign(1.0, got) == math.copysign(1.0, wv)


def test_arithmetic_worked_examples():
    assert f16_arith("add", 2048.0, 1.0) == 2048.0
    assert f16_arith("mul", 300.0, 300.0) == math.inf
    assert f16_arith("div", 1.0, 0.0) == math.inf
    assert f16_arith("div", -1.0, 0.0) == -math.inf
    assert math.isnan(f16_arith("div", 0.0, 0.0))
    assert math.isnan(f16_arith("sub", math.inf, math.inf))
    assert f16_arith("add", 65504.0, 16.0) == math.inf
    assert f16_arith("add", 65504.0, 8.0) == 65504.0  # tie back to max finite


def test_half16_wrapper():
    h = Half16.from_float(1.5)
    assert h.to_float() == 1.5
    assert (h + Half16.from_float(0.25)).to_float() == 1.75
    assert (-h).bits == h.bits | 0x8000
    assert abs(Half16.from_float(-2.0)).to_float() == 2.0
    nan = Half16.from_float(float("nan"))
    assert nan.is_nan and nan != nan
    assert Half16.from_float(0.0).is_zero
    assert Half16.from_float(2.0 ** -25 * 3).is_subnormal
    assert Half16.from_float(1e9).is_inf
    assert (Half16.from_float(1.0) / Half16.from_float(0.0)).is_inf


def test_quantize_array_matches_scalar():
    rng = np.random.default_rng(7)
    xs = rng.standard_normal(5000).astype(np.float32) * rng.choice(
        [1e-8, 1e-4, 1.0, 100.0, 60000.0], size=5000).astype(np.float32)
    q = quantize_f16(xs)
    for x, qx in zip(xs.tolist(), q.tolist()):
        assert float_to_half_bits(x) == float_to_half_bits(qx)
        assert half_bits_to_float(float_to_half_bits(x)) == qx


def test_quantize_preserves_shape_and_dtype():
    x = np.ones((3, 4, 5), dtype=np.float32) * 2049.0
    q = quantize_f16(x)
    assert q.shape == x.shape and q.dtype == np.float32
    assert np.all(q == 2048.0)


def test_is_f16_exact():
    assert is_f16_exact(np.array([1.0, 2048.0, 2.0 ** -24], dtype=np.float32))
    assert not is_f16_exact(np.array([2049.0], dtype=np.float32))
    assert not is_f16_exact(np.array([2.0 ** -25], dtype=np.float32))


def test_count_flushed():
    vals = np.array([2.0 ** -24, 2.0 ** -25, 0.0, 1.0], dtype=np.float32)
    assert count_flushed(vals) == 1  # 2^-24 survives, 2^-25 flushes, 0 not counted
    assert count_flushed(np.zeros(10, dtype=np.float32)) == 0
    assert count_flushed(np.full(3, 2.0 ** -26, dtype=np.float32)) == 3
