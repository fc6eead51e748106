"""Software FP8 E4M3 codec (OCP convention) for quantization parameters.

1 sign bit, 4 exponent bits with bias 7, 3 mantissa bits. There are no
infinities; S.1111.111 is NaN, so the largest finite magnitude is
S.1111.110 = 448. Encoding rounds to nearest, ties to even, and saturates.
"""
import numpy as np

E4M3_MAX = 448.0
E4M3_MAX_CODE = 0x7E
E4M3_NAN = 0x7F
E4M3_SMALLEST = 2.0 ** -9
EXPONENT_BIAS = 7
SIGN_BIT = 0x80


def _decode_bits(code):
    sign = -1.0 if code & SIGN_BIT else 1.0
    exponent = (code >> 3) & 0xF
    mantissa = code & 0x7
    if exponent == 0xF and mantissa == 0x7:
        return float('nan')
    if exponent == 0:
        return sign * mantissa * 2.0 ** (1 - EXPONENT_BIAS - 3)
    return sign * (1 + mantissa / 8.0) * 2.0 ** (exponent - EXPONENT_BIAS)


DECODE_TABLE = np.array([_decode_bits(code) for code in range(256)], dtype=np.float64)
# Codes 0x00..0x7E are the non-negative finite values in increasing order.
_MAGNITUDES = DECODE_TABLE[:E4M3_MAX_CODE + 1]
assert np.all(np.diff(_MAGNITUDES) > 0)


def encode_e4m3_array(values):
    values = np.asarray(values, dtype=np.float64)
    sign = np.where(np.signbit(values), SIGN_BIT, 0).astype(np.uint8)
    nan = np.isnan(values)
    magnitude = np.minimum(np.abs(np.where(nan, 0.0, values)), E4M3_MAX)

    upper = np.minimum(np.searchsorted(_MAGNITUDES, magnitude, side='left'), E4M3_MAX_CODE)
    lower = np.maximum(upper - 1, 0)
    to_upper = _MAGNITUDES[upper] - magnitude
    to_lower = magnitude - _MAGNITUDES[lower]
    # Ties go to the even code, which is the one with a zero mantissa LSB.
    pick_upper = (to_upper < to_lower) | ((to_upper == to_lower) & (upper % 2 == 0))
    codes = np.where(pick_upper, upper, lower).astype(np.uint8) | sign
    return np.where(nan, E4M3_NAN | sign, codes).astype(np.uint8)


# Every finite value once, ascending; -0 is dropped in favour of +0.
_FINITE_CODES = np.array([code for code in np.argsort(DECODE_TABLE, kind='stable')
                          if np.isfinite(DECODE_TABLE[code]) and code != SIGN_BIT], dtype=np.uint8)
_FINITE_VALUES = DECODE_TABLE[_FINITE_CODES]


def encode_e4m3_toward(values, upward):
    """Directed rounding: the smallest E4M3 value >= x (upward) or the largest <= x, saturating at +-448."""
    values = np.asarray(values, dtype=np.float64)
    if upward:
        index = np.searchsorted(_FINITE_VALUES, values, side='left')
    else:
        index = np.searchsorted(_FINITE_VALUES, values, side='right') - 1
    return _FINITE_CODES[np.clip(index, 0, len(_FINITE_CODES) - 1)]


def decode_e4m3_array(codes):
    return DECODE_TABLE[np.asarray(codes, dtype=np.uint8)]


def fp8_encode(value):
    return int(encode_e4m3_array(np.array([value]))[0])


def fp8_decode(code):
    if not 0 <= code <= 0xFF:
        raise ValueError('FP8 code out of range: %r' % code)
    return float(DECODE_TABLE[code])
