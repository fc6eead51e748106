"""SKVQ cache snapshots.

A snapshot is self-contained: it carries the window, filter rules and the codec of
every layer, so restoring it needs no plan or schedule. Layout (all little-endian):

    magic "SKVQ", u16 version
    u32 window, u32 rule count, per rule: string kind, u32 argument
    u32 layer count, per layer:
        key codec, value codec
        u64 total, u64 processed
        u32 retained count, u64 tokens, f32 key rows, f32 value rows
        f32 window key rows, f32 window value rows (total - processed rows each)
        u32 chunk count, per chunk: u32 rows, u64 tokens, key matrices, value matrices
    u32 CRC32
"""
import logging

import numpy as np

from skvq.cache.filters import AttentionSinkRule
from skvq.cache.sliding import SlidingKvCache
from skvq.exceptions import CacheError, FormatError
from skvq.quant.codecs import QuantizedChunk, read_codec
from skvq.utils.binary import BinaryReader, BinaryWriter

logger = logging.getLogger('skvq.cache')

SNAPSHOT_MAGIC = b'SKVQ'
SNAPSHOT_VERSION = 1

_MATRIX_DTYPES = ['<u1', '<u2', '<f4']
_MATRIX_CODES = {('u', 1): 0, ('u', 2): 1, ('f', 4): 2}


def _write_matrix(writer, matrix):
    matrix = np.asarray(matrix)
    code = _MATRIX_CODES[matrix.dtype.kind, matrix.dtype.itemsize]
    writer.u8(code)
    writer.u32(matrix.shape[1])
    writer.array(matrix, _MATRIX_DTYPES[code])


def _read_matrix(reader, rows):
    code = reader.u8()
    if code >= len(_MATRIX_DTYPES):
        raise FormatError('unknown matrix type %d' % code)
    columns = reader.u32()
    return reader.array(_MATRIX_DTYPES[code], rows * columns).reshape(rows, columns)


def _write_rows(writer, rows):
    writer.array(rows, '<f4')


def _read_rows(reader, count, channels):
    return reader.array('<f4', count * channels).reshape(count, channels)


def write_snapshot(cache, path):
    writer = BinaryWriter(SNAPSHOT_MAGIC, SNAPSHOT_VERSION)
    writer.u32(cache.window)
    writer.u32(len(cache.filters))
    for rule in cache.filters:
        if not isinstance(rule, AttentionSinkRule):
            raise CacheError('cannot snapshot a cache using filter rule %r' % rule)
        writer.string(rule.name)
        writer.u32(rule.n_sink)

    writer.u32(len(cache.layers))
    for layer in cache.layers:
        layer.key_codec.write(writer)
        layer.value_codec.write(writer)
        writer.u64(layer.total)
        writer.u64(layer.processed)

        retained = sorted(layer.retained)
        writer.u32(len(retained))
        writer.array(retained, '<u8')
        for side in (0, 1):
            _write_rows(writer, np.array([layer.retained[token][side] for token in retained], dtype=np.float32)
                        .reshape(len(retained), layer.channels))
        _write_rows(writer, layer.window_keys)
        _write_rows(writer, layer.window_values)

        writer.u32(len(layer.key_chunks))
        for key_chunk, value_chunk in zip(layer.key_chunks, layer.value_chunks):
            writer.u32(key_chunk.n_tokens)
            writer.array(key_chunk.tokens, '<u8')
            for chunk in (key_chunk, value_chunk):
                _write_matrix(writer, chunk.payload)
                _write_matrix(writer, chunk.scales)
                _write_matrix(writer, chunk.zeros)

    data = writer.write(path)
    logger.info('Wrote cache snapshot %s: %d layers, %d tokens, %d bytes', path, len(cache.layers), cache.total,
                len(data))
    return data


def _read_chunk(reader, rows, tokens):
    payload = _read_matrix(reader, rows)
    scales = _read_matrix(reader, rows)
    zeros = _read_matrix(reader, rows)
    return QuantizedChunk(tokens, payload, scales, zeros)


def read_snapshot(path):
    reader = BinaryReader.from_path(path, SNAPSHOT_MAGIC, (SNAPSHOT_VERSION,))
    window = reader.u32()
    filters = []
    for _ in range(reader.u32()):
        kind = reader.string()
        argument = reader.u32()
        if kind != AttentionSinkRule.name:
            raise FormatError('unknown filter rule %r in snapshot' % kind)
        filters.append(AttentionSinkRule(argument))

    n_layers = reader.u32()
    codecs = []
    states = []
    for _ in range(n_layers):
        key_codec = read_codec(reader)
        value_codec = read_codec(reader)
        channels = key_codec.channels
        total = reader.u64()
        processed = reader.u64()
        if processed > total:
            raise FormatError('snapshot layer has processed %d of %d tokens' % (processed, total))

        count = reader.u32()
        tokens = reader.array('<u8', count).astype(np.int64)
        retained_keys = _read_rows(reader, count, channels)
        retained_values = _read_rows(reader, count, channels)
        window_keys = _read_rows(reader, total - processed, channels)
        window_values = _read_rows(reader, total - processed, channels)

        key_chunks, value_chunks = [], []
        for _ in range(reader.u32()):
            rows = reader.u32()
            chunk_tokens = reader.array('<u8', rows).astype(np.int64)
            key_chunks.append(_read_chunk(reader, rows, chunk_tokens))
            value_chunks.append(_read_chunk(reader, rows, chunk_tokens))

        stored = np.concatenate([tokens] + [chunk.tokens for chunk in key_chunks])
        if not np.array_equal(np.sort(stored), np.arange(processed)):
            raise FormatError('snapshot layer does not hold each of its %d processed tokens exactly once' % processed)

        codecs.append((key_codec, value_codec))
        states.append((total, processed, dict(zip(tokens.tolist(), zip(retained_keys, retained_values))),
                       window_keys, window_values, key_chunks, value_chunks))
    reader.finish()

    cache = SlidingKvCache(codecs, window, filters)
    for layer, (total, processed, retained, window_keys, window_values, key_chunks, value_chunks) in \
            zip(cache.layers, states):
        layer.total, layer.processed, layer.retained = total, processed, retained
        layer.window_keys, layer.window_values = window_keys, window_values
        layer.key_chunks, layer.value_chunks = key_chunks, value_chunks
    return cache
