"""Row codecs: how one layer's K or V rows are turned into stored chunks and back.

A codec sees rows already in cache channel order (reordered when a plan is
fused) and splits them into groups at `boundaries`. Each stored token row
becomes a QuantizedBlock: the packed codes of all groups back to back plus one
stored parameter set per group.
"""
from collections import namedtuple

import numpy as np

from skvq.exceptions import FormatError, PlanError, QuantizationError
from skvq.quant.groups import (ENCODED_DTYPE, GroupParams, decode_params, dequantize_array, dequantize_symmetric_array,
                               quantize_array, quantize_symmetric_array, symmetric_half_range)
from skvq.quant.packing import pack_rows, packed_size, unpack_rows
from skvq.quant.spec import FULL_PRECISION_BITS, QuantSpec

QuantizedBlock = namedtuple('QuantizedBlock', 'token codes params')


class QuantizedChunk(namedtuple('QuantizedChunk', 'tokens payload scales zeros')):
    """Stored form of a run of token rows.

    `payload` is a (tokens, bytes) uint8 matrix of packed codes, or float32 rows
    for the passthrough codec. `scales` and `zeros` hold the encoded parameters,
    one column per group; `zeros` has no columns for scale-only codecs.
    """
    __slots__ = ()

    @property
    def n_tokens(self):
        return len(self.tokens)

    def block(self, index, codec):
        spec = codec.spec
        params = [GroupParams(scale, zero, stored_scale, stored_zero, spec)
                  for scale, zero, stored_scale, stored_zero in codec.group_params(self, index)]
        return QuantizedBlock(int(self.tokens[index]), self.payload[index].tobytes(), params)


def uniform_boundaries(channels, group_size):
    """Offsets splitting `channels` into groups of `group_size` (the last one may be shorter)."""
    return np.array(sorted(set(range(0, channels, group_size)) | {channels}), dtype=np.int64)


def check_boundaries(boundaries, channels):
    boundaries = np.asarray(boundaries, dtype=np.int64)
    if (boundaries.ndim != 1 or len(boundaries) < 2 or boundaries[0] != 0 or boundaries[-1] != channels or
            np.any(np.diff(boundaries) <= 0)):
        raise PlanError('group boundaries %r do not partition %d channels' % (boundaries.tolist(), channels))
    return boundaries


class RowCodec(object):
    kind = None
    tag = None

    def __init__(self, spec, channels):
        self.spec = spec
        self.channels = channels

    def _check(self, rows):
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.channels:
            raise QuantizationError('%s codec expects rows of %d channels, got shape %r' %
                                    (self.kind, self.channels, rows.shape))
        return rows

    def encode(self, rows, tokens):
        raise NotImplementedError()

    def decode(self, chunk):
        raise NotImplementedError()

    def group_params(self, chunk, index):
        return []

    def declared_bits(self):
        raise NotImplementedError()

    def write(self, writer):
        raise NotImplementedError()

    def same_as(self, other):
        return type(self) is type(other) and self.describe() == other.describe()

    def describe(self):
        return {'kind': self.kind, 'spec': self.spec.to_dict(), 'channels': self.channels}

    def __repr__(self):
        return '<%s %s over %d channels>' % (type(self).__name__, self.spec, self.channels)


class PassthroughCodec(RowCodec):
    """16-bit lossless path: rows are kept as float32 and accounted at 16 bits per element."""
    kind = 'passthrough'
    tag = 0

    def __init__(self, channels):
        super().__init__(QuantSpec(bits=FULL_PRECISION_BITS), channels)

    def encode(self, rows, tokens):
        rows = self._check(rows)
        empty = np.zeros((len(rows), 0), dtype=np.uint16)
        return QuantizedChunk(np.asarray(tokens, dtype=np.int64), rows.astype(np.float32), empty, empty)

    def decode(self, chunk):
        return np.array(chunk.payload, dtype=np.float32)

    def chunk_bytes(self, chunk):
        return chunk.payload.size * FULL_PRECISION_BITS // 8

    def declared_bits(self):
        return float(FULL_PRECISION_BITS)

    def write(self, writer):
        writer.u8(self.tag)
        writer.u32(self.channels)

    @classmethod
    def read(cls, reader):
        return cls(reader.u32())


class GroupCodec(RowCodec):
    """Asymmetric clipped group quantization with one clipping scale per group."""
    kind = 'group'
    tag = 1

    def __init__(self, spec, boundaries, alphas=None):
        if spec.full_precision:
            raise QuantizationError('use PassthroughCodec for 16-bit rows')
        boundaries = np.asarray(boundaries, dtype=np.int64)
        super().__init__(spec, int(boundaries[-1]) if len(boundaries) else 0)
        self.boundaries = check_boundaries(boundaries, self.channels)
        self.n_groups = len(self.boundaries) - 1
        if alphas is None:
            alphas = np.ones(self.n_groups, dtype=np.float32)
        self.alphas = np.asarray(alphas, dtype=np.float32)
        if self.alphas.shape != (self.n_groups,):
            raise PlanError('%d clipping scales for %d groups' % (len(self.alphas), self.n_groups))
        self.row_bytes = packed_size(self.channels, spec.bits)

    def groups(self):
        return zip(self.boundaries[:-1], self.boundaries[1:])

    def _quantize(self, values, alpha):
        return quantize_array(values, alpha, self.spec)

    def _dequantize(self, codes, params):
        return dequantize_array(codes, params)

    def _params(self, chunk, group):
        dtype = ENCODED_DTYPE[self.spec.param_format]
        stored_scale = chunk.scales[:, group].astype(dtype)
        stored_zero = chunk.zeros[:, group].astype(dtype)
        return GroupParams(decode_params(stored_scale, self.spec.param_format),
                           decode_params(stored_zero, self.spec.param_format),
                           stored_scale, stored_zero, self.spec)

    def encode(self, rows, tokens):
        rows = self._check(rows)
        dtype = ENCODED_DTYPE[self.spec.param_format]
        codes = np.empty(rows.shape, dtype=np.uint8)
        scales = np.empty((len(rows), self.n_groups), dtype=dtype)
        zeros = np.empty((len(rows), self.n_groups), dtype=dtype)
        for group, (start, end) in enumerate(self.groups()):
            codes[:, start:end], params = self._quantize(rows[:, start:end], self.alphas[group])
            scales[:, group] = params.stored_scale
            zeros[:, group] = params.stored_zero
        return QuantizedChunk(np.asarray(tokens, dtype=np.int64), pack_rows(codes, self.spec.bits), scales, zeros)

    def decode(self, chunk):
        codes = unpack_rows(chunk.payload, self.channels, self.spec.bits)
        rows = np.empty(codes.shape, dtype=np.float64)
        for group, (start, end) in enumerate(self.groups()):
            rows[:, start:end] = self._dequantize(codes[:, start:end], self._params(chunk, group))
        return rows.astype(np.float32)

    def group_params(self, chunk, index):
        for group in range(self.n_groups):
            params = self._params(chunk, group)
            yield params.scale[index], params.zero[index], params.stored_scale[index], params.stored_zero[index]

    def chunk_bytes(self, chunk):
        return chunk.payload.nbytes + chunk.scales.nbytes + chunk.zeros.nbytes

    @property
    def params_per_group(self):
        return 2

    def declared_bits(self):
        return (self.spec.element_bits +
                self.params_per_group * self.spec.param_bits * self.n_groups / self.channels)

    def describe(self):
        data = super().describe()
        data.update(boundaries=self.boundaries.tolist(), alphas=self.alphas.tolist())
        return data

    def write(self, writer):
        writer.u8(self.tag)
        self.spec.write(writer)
        writer.u32(self.n_groups)
        writer.array(self.boundaries, '<u4')
        writer.array(self.alphas, '<f4')

    @classmethod
    def read(cls, reader):
        spec = QuantSpec.read(reader)
        n_groups = reader.u32()
        boundaries = reader.array('<u4', n_groups + 1)
        return cls(spec, boundaries, reader.array('<f4', n_groups))


class SymmetricGroupCodec(GroupCodec):
    """Scale-only symmetric round-to-nearest groups; clipping scales are ignored."""
    kind = 'symmetric'
    tag = 2

    def __init__(self, spec, boundaries, alphas=None):
        symmetric_half_range(spec)
        super().__init__(spec, boundaries, alphas)

    def _quantize(self, values, alpha):
        return quantize_symmetric_array(values, self.spec)

    def _dequantize(self, codes, params):
        return dequantize_symmetric_array(codes, params)

    def encode(self, rows, tokens):
        chunk = super().encode(rows, tokens)
        return QuantizedChunk(chunk.tokens, chunk.payload, chunk.scales, chunk.zeros[:, :0])

    def _params(self, chunk, group):
        dtype = ENCODED_DTYPE[self.spec.param_format]
        stored_scale = chunk.scales[:, group].astype(dtype)
        scale = decode_params(stored_scale, self.spec.param_format)
        return GroupParams(scale, np.zeros_like(scale), stored_scale, np.zeros_like(stored_scale), self.spec)

    @property
    def params_per_group(self):
        return 1


class SmoothedCodec(RowCodec):
    """Divides each channel by a smoothing factor before the inner codec and multiplies back after."""
    kind = 'smoothed'
    tag = 3

    def __init__(self, inner, factors):
        super().__init__(inner.spec, inner.channels)
        self.inner = inner
        self.factors = np.asarray(factors, dtype=np.float32)
        if self.factors.shape != (self.channels,):
            raise PlanError('%d smoothing factors for %d channels' % (self.factors.size, self.channels))
        if not np.all(self.factors > 0):
            raise PlanError('smoothing factors must be positive')

    def encode(self, rows, tokens):
        rows = self._check(rows)
        return self.inner.encode(rows.astype(np.float64) / self.factors, tokens)

    def decode(self, chunk):
        return (self.inner.decode(chunk).astype(np.float64) * self.factors).astype(np.float32)

    def group_params(self, chunk, index):
        return self.inner.group_params(chunk, index)

    def chunk_bytes(self, chunk):
        return self.inner.chunk_bytes(chunk)

    def declared_bits(self):
        return self.inner.declared_bits()

    def describe(self):
        data = super().describe()
        data.update(inner=self.inner.describe(), factors=self.factors.tolist())
        return data

    def write(self, writer):
        writer.u8(self.tag)
        writer.u32(self.channels)
        writer.array(self.factors, '<f4')
        self.inner.write(writer)

    @classmethod
    def read(cls, reader, channels):
        factors = reader.array('<f4', channels)
        return cls(read_codec(reader), factors)


def make_codec(spec, boundaries, alphas=None, symmetric=False):
    boundaries = np.asarray(boundaries, dtype=np.int64)
    if spec.full_precision:
        return PassthroughCodec(int(boundaries[-1]))
    if symmetric:
        return SymmetricGroupCodec(spec, boundaries)
    return GroupCodec(spec, boundaries, alphas)


def read_codec(reader):
    tag = reader.u8()
    if tag == PassthroughCodec.tag:
        return PassthroughCodec.read(reader)
    if tag == GroupCodec.tag:
        return GroupCodec.read(reader)
    if tag == SymmetricGroupCodec.tag:
        return SymmetricGroupCodec.read(reader)
    if tag == SmoothedCodec.tag:
        return SmoothedCodec.read(reader, reader.u32())
    raise FormatError('unknown codec tag %d' % tag)
