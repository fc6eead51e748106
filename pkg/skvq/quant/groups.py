"""Group-wise quantization arithmetic.

Asymmetric groups use zero z = alpha * min and step h = (alpha * max - z) / L,
L being the largest code. Both are rounded to the parameter format to nearest,
unless the rounded grid would then stop more than half a step short of either
end of the range; such rows store z rounded down and h rounded up instead. The
rounded values are the ones used to quantize and dequantize:

    q = clip(rint((x - z) / h), 0, L),    x_hat = q * h + z

Every function here works on a (rows, n) matrix, one parameter pair per row,
so a whole chunk of tokens goes through a single numpy expression per group.
"""
from collections import namedtuple

import numpy as np

from skvq.exceptions import QuantizationError
from skvq.quant.fp8 import E4M3_SMALLEST, decode_e4m3_array, encode_e4m3_array, encode_e4m3_toward
from skvq.quant.spec import FP16, FP8

FP16_MAX = float(np.finfo(np.float16).max)
FP16_SMALLEST = 2.0 ** -24
SMALLEST_SCALE = {FP16: FP16_SMALLEST, FP8: E4M3_SMALLEST}
ENCODED_DTYPE = {FP16: np.uint16, FP8: np.uint8}

# Degenerate groups (max == min) get a tiny step relative to their value.
DEGENERATE_STEP = 2.0 ** -24


class GroupParams(namedtuple('GroupParams', 'scale zero stored_scale stored_zero spec')):
    """Decoded scale/zero (float64, what the arithmetic uses) and their stored encodings.

    Fields are scalars for a single group or arrays with one entry per row.
    """
    __slots__ = ()


def encode_params(values, param_format):
    values = np.asarray(values, dtype=np.float64)
    if param_format == FP8:
        return encode_e4m3_array(values)
    return np.clip(values, -FP16_MAX, FP16_MAX).astype(np.float16).view(np.uint16)


def encode_params_toward(values, param_format, upward):
    """Round to the parameter format in one direction instead of to nearest."""
    values = np.asarray(values, dtype=np.float64)
    if param_format == FP8:
        return encode_e4m3_toward(values, upward)
    values = np.clip(values, -FP16_MAX, FP16_MAX)
    half = values.astype(np.float16)
    off = half < values if upward else half > values
    half = np.where(off, np.nextafter(half, np.float16(np.inf if upward else -np.inf)), half)
    return half.astype(np.float16).view(np.uint16)


def decode_params(encoded, param_format):
    if param_format == FP8:
        return decode_e4m3_array(encoded)
    return np.asarray(encoded, dtype=np.uint16).view(np.float16).astype(np.float64)


def _round_param(values, param_format):
    encoded = encode_params(values, param_format)
    return encoded, decode_params(encoded, param_format)


def _check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)) or np.any(alpha > 1):
        raise QuantizationError('clipping scale must lie in (0, 1], got %r' % (alpha.tolist(),))
    return alpha


def _check_rows(values, spec):
    if spec.full_precision:
        raise QuantizationError('16-bit groups are stored as-is, not quantized')
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] == 0:
        raise QuantizationError('cannot quantize an empty group')
    if not np.all(np.isfinite(values)):
        raise QuantizationError('cannot quantize non-finite values')
    return values


def _positive_scale(scale, encoded, spec):
    small = scale <= 0
    if np.any(small):
        encoded = encoded.copy()
        encoded[small] = encode_params(SMALLEST_SCALE[spec.param_format], spec.param_format)
        scale = decode_params(encoded, spec.param_format)
    return scale, encoded


def make_params(low, high, alpha, spec):
    """Parameters for rows whose observed range is [low, high]."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    alpha = _check_alpha(alpha)
    degenerate = ~(high > low)

    bottom = np.where(degenerate, low, alpha * low)
    top = alpha * high
    code_max = spec.code_max
    stored_zero, zero = _round_param(bottom, spec.param_format)
    step = np.where(degenerate, np.maximum(np.abs(low), 1.0) * DEGENERATE_STEP, (top - zero) / code_max)
    stored_scale, scale = _round_param(step, spec.param_format)
    scale, stored_scale = _positive_scale(scale, stored_scale, spec)

    # The rounded grid has to reach within half a step of both ends of [bottom, top].
    uncovered = ~degenerate & ((zero - scale / 2 > bottom) | (zero + (code_max + 0.5) * scale < top))
    if np.any(uncovered):
        stored_zero = np.where(uncovered, encode_params_toward(bottom, spec.param_format, False), stored_zero)
        zero = decode_params(stored_zero, spec.param_format)
        step = np.where(uncovered, (top - zero) / code_max, step)
        stored_scale = np.where(uncovered, encode_params_toward(step, spec.param_format, True), stored_scale)
        scale, stored_scale = _positive_scale(decode_params(stored_scale, spec.param_format), stored_scale, spec)
    return GroupParams(scale, zero, stored_scale, stored_zero, spec)


def quantize_array(values, alpha, spec):
    """Quantize each row of `values` as one group. Returns (uint8 codes, GroupParams)."""
    values = _check_rows(values, spec)
    params = make_params(values.min(axis=1), values.max(axis=1), alpha, spec)
    codes = np.rint((values - params.zero[:, None]) / params.scale[:, None])
    return np.clip(codes, 0, spec.code_max).astype(np.uint8), params


def dequantize_array(codes, params):
    codes = np.asarray(codes)
    if codes.size and codes.max() > params.spec.code_max:
        raise QuantizationError('code %d out of range for %s' % (codes.max(), params.spec))
    return codes * np.asarray(params.scale)[:, None] + np.asarray(params.zero)[:, None]


def quantize_group(values, alpha, spec):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise QuantizationError('a group is a vector, got shape %r' % (values.shape,))
    codes, params = quantize_array(values[None, :], alpha, spec)
    return codes[0], GroupParams(*(field[0] for field in params[:4]), spec)


def dequantize_group(codes, params):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > params.spec.code_max):
        raise QuantizationError('code out of range for %s' % params.spec)
    return codes * params.scale + params.zero


def symmetric_half_range(spec):
    if spec.ternary:
        return 1
    if spec.bits < 2:
        raise QuantizationError('symmetric quantization needs at least 2 bits')
    return 2 ** (spec.bits - 1) - 1


def quantize_symmetric_array(values, spec):
    """Signed codes in [-half, half] around zero, stored offset by +half. Only the scale is kept."""
    values = _check_rows(values, spec)
    half = symmetric_half_range(spec)
    peak = np.abs(values).max(axis=1)
    step = np.where(peak > 0, peak / half, DEGENERATE_STEP)
    stored_scale, scale = _round_param(step, spec.param_format)
    uncovered = peak > (half + 0.5) * scale
    if np.any(uncovered):
        stored_scale = np.where(uncovered, encode_params_toward(step, spec.param_format, True), stored_scale)
        scale = decode_params(stored_scale, spec.param_format)
    scale, stored_scale = _positive_scale(scale, stored_scale, spec)

    codes = np.clip(np.rint(values / scale[:, None]), -half, half) + half
    zero = np.zeros_like(scale)
    params = GroupParams(scale, zero, stored_scale, np.zeros_like(stored_scale), spec)
    return codes.astype(np.uint8), params


def dequantize_symmetric_array(codes, params):
    half = symmetric_half_range(params.spec)
    codes = np.asarray(codes)
    if codes.size and codes.max() > 2 * half:
        raise QuantizationError('code %d out of range for symmetric %s' % (codes.max(), params.spec))
    return (codes.astype(np.float64) - half) * np.asarray(params.scale)[:, None]
