"""Software emulation of IEEE 754 binary16 ("half precision").

The format has 1 sign bit, 5 exponent bits (bias 15) and 10 stored
significand bits.  Largest finite value is 65504, smallest positive
subnormal is 2**-24, and subnormals are fully supported.  All rounding
is round-to-nearest-even (RNE).

Arithmetic follows the compute-wide-then-round-once contract: operands
are widened exactly, the operation is carried out in a wider format,
and the result is rounded once to binary16.  Widening to binary64 makes
add/sub/mul exact before the final rounding; for division the double
rounding through binary64 is innocuous because 53 significand bits are
more than 2*11 + 2.

Invalid operations produce the single canonical quiet NaN 0x7E00; NaN
payloads are not propagated.

Scalar conversions are pure bit manipulation on the binary64 pattern
(binary32 inputs widen exactly, so they round identically).  The
vectorized array path ``quantize_f16`` goes through numpy's float16
cast; the test suite checks both paths against each other over every
16-bit pattern.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Half16",
    "POS_INF_BITS",
    "NEG_INF_BITS",
    "QNAN_BITS",
    "MAX_FINITE",
    "MIN_NORMAL",
    "MIN_SUBNORMAL",
    "float_to_half_bits",
    "half_bits_to_float",
    "f32_to_f16",
    "f16_to_f32",
    "f16_arith",
    "quantize_f16",
    "is_f16_exact",
    "count_flushed",
]

SIGN_MASK = 0x8000
EXP_MASK = 0x7C00
SIG_MASK = 0x03FF

POS_INF_BITS = 0x7C00
NEG_INF_BITS = 0xFC00
QNAN_BITS = 0x7E00

MAX_FINITE = 65504.0
MIN_NORMAL = 2.0 ** -14
MIN_SUBNORMAL = 2.0 ** -24


def float_to_half_bits(x: float) -> int:
    """Round a float to the nearest binary16 bit pattern, ties to even.

    The input is treated as binary64; binary32 values widen exactly, so
    converting them through here performs the single correct rounding.
    Any NaN input collapses to the canonical quiet NaN.
    """
    (d,) = struct.unpack("<Q", struct.pack("<d", float(x)))
    h_sgn = (d >> 48) & SIGN_MASK
    d_exp = d & 0x7FF0000000000000
    d_sig = d & 0x000FFFFFFFFFFFFF

    # |x| >= 65536 after rounding, infinity, or NaN.
    if d_exp >= 0x40F0000000000000:
        if d_exp == 0x7FF0000000000000 and d_sig != 0:
            return QNAN_BITS
        return h_sgn | POS_INF_BITS

    # |x| < 2**-14: subnormal half or signed zero.
    if d_exp <= 0x3F00000000000000:
        if d_exp < 0x3E60000000000000:
            # Below 2**-25: rounds to signed zero (2**-25 itself is the
            # tie with 2**-24 and goes to even, i.e. zero, below).
            return h_sgn
        # Align the subnormal significand.  binary64 has room to shift
        # left, so no bits are lost before the rounding step.
        d_sig |= 0x0010000000000000
        d_sig <<= (d_exp >> 52) - 998
        # RNE: skip the increment only on a true tie with an even kept bit.
        if (d_sig & 0x003FFFFFFFFFFFFF) != 0x0010000000000000:
            d_sig += 0x0010000000000000
        return h_sgn | (d_sig >> 53)

    # Normal range.  42 = 52 - 10 bits are dropped; the tie pattern is a
    # one in the rounding bit with an even kept LSB.
    h_exp = (d_exp - 0x3F00000000000000) >> 42
    if (d_sig & 0x000007FFFFFFFFFF) != 0x0000020000000000:
        d_sig += 0x0000020000000000
    h_sig = d_sig >> 42
    # A carry out of the significand bumps the exponent; reaching 0x7C00
    # is the correct overflow to infinity (e.g. 65520 -> +inf).
    return h_sgn | (h_exp + h_sig)


def half_bits_to_float(bits: int) -> float:
    """Widen a binary16 bit pattern exactly (NaN patterns give a qNaN)."""
    bits &= 0xFFFF
    sign = -1.0 if bits & SIGN_MASK else 1.0
    exp = (bits & EXP_MASK) >> 10
    sig = bits & SIG_MASK
    if exp == 0x1F:
        return math.nan if sig else sign * math.inf
    if exp == 0:
        return sign * (sig * MIN_SUBNORMAL)
    return sign * ((1024 + sig) * 2.0 ** (exp - 25))


@dataclass(frozen=True)
class Half16:
    """A binary16 value held as its 16-bit pattern.

    Arithmetic operators follow the emulation contract (widen, compute,
    round once).  Equality is IEEE equality on the values, so NaN != NaN
    and +0 == -0; use ``bits`` to compare representations.
    """

    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"half bits out of range: {self.bits:#x}")

    @classmethod
    def from_float(cls, x: float) -> "Half16":
        return cls(float_to_half_bits(x))

    def to_float(self) -> float:
        return half_bits_to_float(self.bits)

    @property
    def is_nan(self) -> bool:
        return (self.bits & EXP_MASK) == EXP_MASK and (self.bits & SIG_MASK) != 0

    @property
    def is_inf(self) -> bool:
        return (self.bits & 0x7FFF) == POS_INF_BITS

    @property
    def is_zero(self) -> bool:
        return (self.bits & 0x7FFF) == 0

    @property
    def is_subnormal(self) -> bool:
        return (self.bits & EXP_MASK) == 0 and (self.bits & SIG_MASK) != 0

    def __float__(self) -> float:
        return self.to_float()

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Half16):
            return self.to_float() == other.to_float()
        if isinstance(other, (int, float)):
            return self.to_float() == float(other)
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.to_float())

    def __repr__(self) -> str:
        return f"Half16({self.to_float()!r}, bits={self.bits:#06x})"

    def __add__(self, other: "Half16") -> "Half16":
        return Half16.from_float(f16_arith("add", self, other))

    def __sub__(self, other: "Half16") -> "Half16":
        return Half16.from_float(f16_arith("sub", self, other))

    def __mul__(self, other: "Half16") -> "Half16":
        return Half16.from_float(f16_arith("mul", self, other))

    def __truediv__(self, other: "Half16") -> "Half16":
        return Half16.from_float(f16_arith("div", self, other))

    def __neg__(self) -> "Half16":
        return Half16(self.bits ^ SIGN_MASK)

    def __abs__(self) -> "Half16":
        return Half16(self.bits & 0x7FFF)


def f32_to_f16(x: float) -> Half16:
    """Convert a binary32 value to binary16 with a single RNE rounding."""
    return Half16.from_float(x)


def f16_to_f32(h: Half16) -> float:
    """Exact widening; every binary16 value is representable in binary32."""
    return h.to_float()


def _div_wide(a: float, b: float) -> float:
    if b == 0.0:
        if math.isnan(a) or a == 0.0:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": _div_wide,
}


def f16_arith(op: str, a, b) -> float:
    """Apply ``op`` to two binary16 operands and round the result once.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``div``.  Operands may be
    ``Half16`` or plain floats; floats are rounded to binary16 first, so
    an operand of 2049.0 behaves as 2048.0.  The computation runs in a
    wide format and rounds once on the way out.  Invalid operations
    (0/0, inf - inf, 0 * inf, ...) give the canonical qNaN.
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected add/sub/mul/div") from None
    aw = a.to_float() if isinstance(a, Half16) else half_bits_to_float(float_to_half_bits(a))
    bw = b.to_float() if isinstance(b, Half16) else half_bits_to_float(float_to_half_bits(b))
    return half_bits_to_float(float_to_half_bits(fn(aw, bw)))


def quantize_f16(a) -> np.ndarray:
    """Round an array through binary16 and widen back to float32.

    This is the vectorized store path for emulated-binary16 tensors.  It
    agrees bit-for-bit with the scalar ``float_to_half_bits`` routine
    (checked exhaustively in the tests).  Overflow to infinity is part
    of the contract, so numpy's overflow warning is suppressed.
    """
    arr = np.asarray(a, dtype=np.float32)
    with np.errstate(over="ignore"):
        return arr.astype(np.float16).astype(np.float32)


def is_f16_exact(a) -> bool:
    """True when every element survives a binary16 round trip unchanged."""
    arr = np.asarray(a, dtype=np.float32)
    q = quantize_f16(arr)
    same = (q == arr) | (np.isnan(arr) & np.isnan(q))
    return bool(np.all(same))


def count_flushed(values) -> int:
    """Count nonzero binary32 values whose binary16 image is (signed) zero.

    This is the diagnostic behind loss scaling: gradients that are small
    but nonzero in binary32 can flush to zero when squeezed through
    binary16, and scaling the loss by a power of two moves them back
    into representable range.
    """
    arr = np.asarray(values, dtype=np.float32).ravel()
    return int(np.count_nonzero((arr != 0.0) & (quantize_f16(arr) == 0.0)))
