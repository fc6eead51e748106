"""Bit packing for quantization codes.

Integer widths are packed as a little-endian bit stream: code i occupies bits
[i*N, (i+1)*N) with the least significant bit first, so four 2-bit codes share
one byte as c0 | c1 << 2 | c2 << 4 | c3 << 6.

Ternary codes are packed five per byte in base 3 (c0 + 3*c1 + 9*c2 + 27*c3 +
81*c4), which is 1.6 bits per element. Bytes above 242 never occur.
"""
import numpy as np

from skvq.exceptions import QuantizationError
from skvq.quant.spec import FULL_PRECISION_BITS, INTEGER_BITS, TERNARY

TERNARY_PER_BYTE = 5
TERNARY_POWERS = 3 ** np.arange(TERNARY_PER_BYTE, dtype=np.uint16)
TERNARY_BYTE_MAX = 3 ** TERNARY_PER_BYTE - 1


def _check_bits(bits):
    if bits != TERNARY and bits not in INTEGER_BITS:
        if bits == FULL_PRECISION_BITS:
            raise QuantizationError('full precision rows are not bit-packed')
        raise QuantizationError('cannot pack %r-bit codes' % (bits,))


def code_limit(bits):
    return 2 if bits == TERNARY else 2 ** bits - 1


def packed_size(count, bits):
    _check_bits(bits)
    if bits == TERNARY:
        return -(-count // TERNARY_PER_BYTE)
    return -(-count * bits // 8)


def _as_codes(codes, bits):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > code_limit(bits)):
        raise QuantizationError('code out of range for %s-bit packing' % (bits,))
    return codes.astype(np.uint8)


def pack_rows(codes, bits):
    """Pack a (rows, count) code matrix row by row; every row starts on a byte boundary."""
    _check_bits(bits)
    codes = _as_codes(codes, bits)
    rows, count = codes.shape

    if bits == TERNARY:
        width = packed_size(count, bits)
        padded = np.zeros((rows, width * TERNARY_PER_BYTE), dtype=np.uint16)
        padded[:, :count] = codes
        return (padded.reshape(rows, width, TERNARY_PER_BYTE) @ TERNARY_POWERS).astype(np.uint8)

    shifts = np.arange(bits, dtype=np.uint8)
    stream = ((codes[:, :, None] >> shifts) & 1).reshape(rows, count * bits)
    return np.packbits(stream, axis=-1, bitorder='little')


def unpack_rows(packed, count, bits):
    _check_bits(bits)
    packed = np.asarray(packed, dtype=np.uint8)
    rows = packed.shape[0]
    if packed.shape[1] != packed_size(count, bits):
        raise QuantizationError('expected %d packed bytes per row, got %d' %
                                (packed_size(count, bits), packed.shape[1]))

    if bits == TERNARY:
        if packed.size and packed.max() > TERNARY_BYTE_MAX:
            raise QuantizationError('invalid ternary byte %d' % packed.max())
        digits = (packed[:, :, None].astype(np.uint16) // TERNARY_POWERS) % 3
        return digits.reshape(rows, -1)[:, :count].astype(np.uint8)

    stream = np.unpackbits(packed, axis=-1, count=count * bits, bitorder='little')
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (stream.reshape(rows, count, bits) * weights).sum(axis=-1, dtype=np.uint8)


def pack_codes(codes, bits):
    codes = np.asarray(codes).reshape(1, -1)
    return pack_rows(codes, bits).tobytes()


def unpack_codes(data, count, bits):
    packed = np.frombuffer(bytes(data), dtype=np.uint8).reshape(1, -1)
    return unpack_rows(packed, count, bits)[0]
