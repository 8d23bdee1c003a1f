"""Bit-exact signed fixed-point arithmetic.

Everything the accelerator stores is an 8-bit two's-complement code with a
per-role Q-format; everything it accumulates lives in a 16-bit saturating
accumulator.  Saturating adds are order-sensitive, so every reduction in
this package pins its accumulation order explicitly and the helpers here
are written to be reproducible to the bit on any platform.

Rounding convention at every width reduction: round half away from zero.
"""

import numpy as np

INT8_MIN = -128
INT8_MAX = 127
INT16_MIN = -32768
INT16_MAX = 32767


class QFormat:
    """Signed 8-bit fixed-point format with a declared fractional bit count.

    The representable range is [-2**(7-frac_bits), (127) * 2**-frac_bits];
    an instance with frac_bits=5 prints as ``Q2.5`` (sign + 2 integer + 5
    fractional bits).
    """

    __slots__ = ("total_bits", "frac_bits")

    def __init__(self, frac_bits, total_bits=8):
        if total_bits != 8:
            raise ValueError("only 8-bit storage formats are supported")
        if not 0 <= int(frac_bits) <= 7:
            raise ValueError("frac_bits must be in [0, 7], got %r" % (frac_bits,))
        self.total_bits = 8
        self.frac_bits = int(frac_bits)

    @property
    def lsb(self):
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self):
        return INT8_MIN * self.lsb

    @property
    def max_value(self):
        return INT8_MAX * self.lsb

    def __eq__(self, other):
        return isinstance(other, QFormat) and other.frac_bits == self.frac_bits

    def __hash__(self):
        return hash(("QFormat", self.frac_bits))

    def __repr__(self):
        return "Q%d.%d" % (7 - self.frac_bits, self.frac_bits)


class Q8:
    """A single 8-bit code together with its format (scalar convenience)."""

    __slots__ = ("code", "format")

    def __init__(self, code, fmt):
        code = int(code)
        if not INT8_MIN <= code <= INT8_MAX:
            raise ValueError("code %d outside int8 range" % code)
        self.code = code
        self.format = fmt

    @property
    def value(self):
        return self.code * self.format.lsb

    def __repr__(self):
        return "Q8(%d, %r)" % (self.code, self.format)


class Acc16:
    """16-bit saturating accumulator value at a known fractional scale."""

    __slots__ = ("value", "frac_bits", "saturated")

    def __init__(self, value=0, frac_bits=0, saturated=False):
        value = int(value)
        if not INT16_MIN <= value <= INT16_MAX:
            raise ValueError("accumulator %d outside int16 range" % value)
        self.value = value
        self.frac_bits = int(frac_bits)
        self.saturated = bool(saturated)

    def __repr__(self):
        return "Acc16(%d, frac=%d%s)" % (
            self.value, self.frac_bits, ", saturated" if self.saturated else "")


def round_half_away(x):
    """Round to nearest integer, ties away from zero (scalar or ndarray)."""
    x = np.asarray(x)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def quantize(values, fmt):
    """Real value(s) -> int8 code(s): scale, round half away, clamp."""
    scaled = np.asarray(values, dtype=np.float64) * (1 << fmt.frac_bits)
    codes = np.clip(round_half_away(scaled), INT8_MIN, INT8_MAX)
    if np.ndim(values) == 0:
        return int(codes)
    return np.asarray(codes, dtype=np.int64)


def dequantize(codes, fmt):
    """int8 code(s) -> exact real value(s) code * 2**-frac_bits."""
    vals = np.asarray(codes, dtype=np.float64) * fmt.lsb
    if np.ndim(codes) == 0:
        return float(vals)
    return vals


def sat16(values):
    """Clamp to the signed 16-bit range (scalar int or ndarray)."""
    if np.ndim(values) == 0:
        return min(max(int(values), INT16_MIN), INT16_MAX)
    return np.clip(np.asarray(values, dtype=np.int64), INT16_MIN, INT16_MAX)


def mac(acc, a, b):
    """One multiply-accumulate: acc' = sat16(acc + a.code * b.code).

    The product is implicitly at a.frac_bits + b.frac_bits fractional bits;
    an accumulator created by a fresh chain carries that scale.  Saturation
    clamps (never wraps) and is recorded on the returned accumulator.
    """
    prod_frac = a.format.frac_bits + b.format.frac_bits
    if acc.value != 0 and acc.frac_bits != prod_frac:
        raise ValueError("accumulator scale %d does not match product scale %d"
                         % (acc.frac_bits, prod_frac))
    raw = acc.value + a.code * b.code
    clamped = sat16(raw)
    return Acc16(clamped, prod_frac, acc.saturated or clamped != raw)


def shift_round(values, shift):
    """Arithmetic right shift by `shift` with round-half-away-from-zero.

    No clamping; works on scalars and ndarrays.  shift == 0 is identity.
    """
    if shift < 0:
        raise ValueError("negative shift")
    if shift == 0:
        if np.ndim(values) == 0:
            return int(values)
        return np.asarray(values, dtype=np.int64)
    if np.ndim(values) == 0:
        v = int(values)
        mag = (abs(v) + (1 << (shift - 1))) >> shift
        return -mag if v < 0 else mag
    v = np.asarray(values, dtype=np.int64)
    mag = (np.abs(v) + (1 << (shift - 1))) >> shift
    return np.where(v < 0, -mag, mag)


def requantize(value, value_frac_bits, target):
    """16-bit accumulator value -> int8 code in the target format.

    Shift right by the scale difference with round-half-away, then clamp
    to [-128, 127].  Accepts a scalar or an ndarray of raw values.
    """
    shift = value_frac_bits - target.frac_bits
    if shift < 0:
        raise ValueError("cannot requantize to more fractional bits "
                         "(%d -> %d)" % (value_frac_bits, target.frac_bits))
    rounded = shift_round(value, shift)
    if np.ndim(value) == 0:
        return min(max(int(rounded), INT8_MIN), INT8_MAX)
    return np.clip(rounded, INT8_MIN, INT8_MAX)


def requantize_acc(acc, target):
    """Acc16 -> Q8 in the target format (scalar wrapper around requantize)."""
    return Q8(requantize(acc.value, acc.frac_bits, target), target)


def mac_run(products, init=0):
    """Sequential saturating accumulation of `products` along the last axis.

    Equivalent to repeated `mac` starting from `init`: every intermediate
    sum is clamped to int16 before the next term is added, which makes the
    result depend on term order.  Returns (acc, saturated) as int64 / bool
    arrays over the leading axes.

    Fast path: if no running prefix ever leaves the int16 range the chain
    equals the plain wide-integer sum, so a vectorized cumsum is exact and
    only rows that actually clip fall back to the explicit loop.
    """
    p = np.asarray(products, dtype=np.int64)
    if p.ndim == 0:
        p = p.reshape(1, 1)
    lead = p.shape[:-1]
    k = p.shape[-1]
    acc = np.full(lead, int(init), dtype=np.int64)
    saturated = np.zeros(lead, dtype=bool)
    if k == 0:
        return acc, saturated
    prefixes = np.cumsum(p, axis=-1) + int(init)
    ok = np.all((prefixes >= INT16_MIN) & (prefixes <= INT16_MAX), axis=-1)
    acc = np.where(ok, prefixes[..., -1], 0)
    if not np.all(ok):
        flat_p = p.reshape(-1, k)
        flat_acc = acc.reshape(-1)
        flat_sat = saturated.reshape(-1)
        for idx in np.flatnonzero(~ok.reshape(-1)):
            a = int(init)
            hit = False
            for term in flat_p[idx]:
                raw = a + int(term)
                a = min(max(raw, INT16_MIN), INT16_MAX)
                hit = hit or a != raw
            flat_acc[idx] = a
            flat_sat[idx] = hit
        acc = flat_acc.reshape(lead)
        saturated = flat_sat.reshape(lead)
    return acc, saturated


def sat_add16(a, b):
    """Saturating 16-bit add of two accumulator arrays/scalars."""
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return sat16(int(a) + int(b))
    return sat16(np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64))
