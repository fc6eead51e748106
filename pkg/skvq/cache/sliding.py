"""Sliding-window quantized KV cache.

Each layer keeps the most recent `window` tokens at full precision. Tokens that
slide out are handed to the filter rules; the ones no rule retains are
quantized once, in a single batch per `advance` call, and never touched again.
`processed` counts tokens that have left the window.
"""
import logging
from collections import namedtuple

import numpy as np

from skvq.cache.filters import retained_mask
from skvq.exceptions import CacheError
from skvq.quant.codecs import QuantizedChunk
from skvq.quant.spec import FULL_PRECISION_BITS

logger = logging.getLogger('skvq.cache')

FP_BYTES = FULL_PRECISION_BITS // 8


class CacheStats(namedtuple('CacheStats', 'quantized_tokens retained_tokens window_tokens channels '
                                          'code_bytes param_bytes fp_bytes')):
    """Storage accounting for one cache (K or V). Full-precision rows count 16 bits per element."""
    __slots__ = ()

    @property
    def quantized_bits(self):
        """Measured bits per element over quantized tokens only."""
        elements = self.quantized_tokens * self.channels
        return (self.code_bytes + self.param_bytes) * 8 / elements if elements else 0.0

    @property
    def total_bytes(self):
        return self.code_bytes + self.param_bytes + self.fp_bytes

    @property
    def bits_per_element(self):
        elements = (self.quantized_tokens + self.retained_tokens + self.window_tokens) * self.channels
        return self.total_bytes * 8 / elements if elements else 0.0

    def __add__(self, other):
        if self.channels != other.channels:
            raise CacheError('cannot add statistics of %d and %d channel caches' % (self.channels, other.channels))
        return CacheStats(*(a + b for a, b in zip(self[:3], other[:3])), self.channels,
                          *(a + b for a, b in zip(self[4:], other[4:])))


def _empty_rows(channels):
    return np.zeros((0, channels), dtype=np.float32)


def _merge(chunks):
    if len(chunks) > 1:
        chunks[:] = [QuantizedChunk(*(np.concatenate([getattr(chunk, field) for chunk in chunks])
                                      for field in QuantizedChunk._fields))]
    return chunks[0] if chunks else None


class CacheLayer(object):
    def __init__(self, key_codec, value_codec, window):
        if key_codec.channels != value_codec.channels:
            raise CacheError('key codec has %d channels, value codec %d' % (key_codec.channels, value_codec.channels))
        if window < 0:
            raise CacheError('window must be non-negative, got %d' % window)
        self.key_codec = key_codec
        self.value_codec = value_codec
        self.window = int(window)
        self.channels = key_codec.channels
        self.total = 0
        self.processed = 0
        self.window_keys = _empty_rows(self.channels)
        self.window_values = _empty_rows(self.channels)
        self.key_chunks = []
        self.value_chunks = []
        self.retained = {}

    def append(self, keys, values):
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.channels or values.shape != keys.shape:
            raise CacheError('cannot append rows of shape %r / %r to a %d channel cache' %
                             (keys.shape, values.shape, self.channels))
        self.window_keys = np.concatenate([self.window_keys, keys])
        self.window_values = np.concatenate([self.window_values, values])
        self.total += len(keys)

    def advance(self, filters):
        end = self.total - self.window
        if end <= self.processed:
            return
        count = end - self.processed
        tokens = np.arange(self.processed, end)
        keys, values = self.window_keys[:count], self.window_values[:count]
        keep = retained_mask(filters, tokens, keys, values, self.total)

        for token, key, value in zip(tokens[keep], keys[keep], values[keep]):
            self.retained[int(token)] = (key.copy(), value.copy())
        quantize = ~keep
        if quantize.any():
            key_chunk = self.key_codec.encode(keys[quantize], tokens[quantize])
            value_chunk = self.value_codec.encode(values[quantize], tokens[quantize])
            self.key_chunks.append(key_chunk)
            self.value_chunks.append(value_chunk)
        self.window_keys = self.window_keys[count:]
        self.window_values = self.window_values[count:]
        self.processed = end

    def materialize(self):
        """Rows for every token in order: dequantized history, retained rows, then the window.

        Stored chunks are merged into one when read; their bytes are not requantized.
        """
        keys = np.empty((self.total, self.channels), dtype=np.float32)
        values = np.empty((self.total, self.channels), dtype=np.float32)
        for codec, chunks, rows in ((self.key_codec, self.key_chunks, keys),
                                    (self.value_codec, self.value_chunks, values)):
            chunk = _merge(chunks)
            if chunk is not None:
                rows[chunk.tokens] = codec.decode(chunk)
        for token, (key, value) in self.retained.items():
            keys[token] = key
            values[token] = value
        keys[self.processed:] = self.window_keys
        values[self.processed:] = self.window_values
        return keys, values

    def quantized_tokens(self):
        if not self.key_chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([chunk.tokens for chunk in self.key_chunks])

    def _joined(self, chunks, field):
        parts = [getattr(chunk, field) for chunk in chunks]
        return np.concatenate(parts) if parts else None

    def same_state(self, other):
        if (self.total, self.processed, self.window, self.channels) != \
                (other.total, other.processed, other.window, other.channels):
            return False
        if not (self.key_codec.same_as(other.key_codec) and self.value_codec.same_as(other.value_codec)):
            return False
        if not (np.array_equal(self.window_keys, other.window_keys) and
                np.array_equal(self.window_values, other.window_values)):
            return False
        if sorted(self.retained) != sorted(other.retained):
            return False
        for token, (key, value) in self.retained.items():
            if not (np.array_equal(key, other.retained[token][0]) and np.array_equal(value, other.retained[token][1])):
                return False
        for chunks, other_chunks in ((self.key_chunks, other.key_chunks), (self.value_chunks, other.value_chunks)):
            for field in ('tokens', 'payload', 'scales', 'zeros'):
                mine, theirs = self._joined(chunks, field), self._joined(other_chunks, field)
                if (mine is None) != (theirs is None) or (mine is not None and not np.array_equal(mine, theirs)):
                    return False
        return True

    def _stats(self, codec, chunks):
        code = params = 0
        for chunk in chunks:
            chunk_params = chunk.scales.nbytes + chunk.zeros.nbytes
            params += chunk_params
            code += codec.chunk_bytes(chunk) - chunk_params
        fp_tokens = len(self.retained) + (self.total - self.processed)
        return CacheStats(sum(chunk.n_tokens for chunk in chunks), len(self.retained), self.total - self.processed,
                          self.channels, code, params, fp_tokens * self.channels * FP_BYTES)

    def stats(self):
        return {'key': self._stats(self.key_codec, self.key_chunks),
                'value': self._stats(self.value_codec, self.value_chunks)}


class SlidingKvCache(object):
    """The KV cache of one sequence: one CacheLayer per transformer layer plus the shared filter rules."""

    def __init__(self, codecs, window, filters=()):
        self.layers = [CacheLayer(key_codec, value_codec, window) for key_codec, value_codec in codecs]
        self.window = int(window)
        self.filters = list(filters)

    @property
    def total(self):
        return self.layers[0].total if self.layers else 0

    @property
    def processed(self):
        return self.layers[0].processed if self.layers else 0

    def retained_tokens(self):
        return sorted(self.layers[0].retained) if self.layers else []

    def stats(self):
        totals = {}
        for layer in self.layers:
            for cache, stats in layer.stats().items():
                totals[cache] = totals[cache] + stats if cache in totals else stats
        return totals

    def same_state(self, other):
        return (len(self.layers) == len(other.layers) and
                [rule.describe() for rule in self.filters] == [rule.describe() for rule in other.filters] and
                all(mine.same_state(theirs) for mine, theirs in zip(self.layers, other.layers)))

    def snapshot(self, path):
        from skvq.cache.snapshot import write_snapshot
        return write_snapshot(self, path)

    @classmethod
    def restore(cls, path):
        from skvq.cache.snapshot import read_snapshot
        return read_snapshot(path)


class DenseLayer(object):
    """Full-precision reference layer with the CacheLayer interface; nothing is ever quantized."""

    def __init__(self, channels):
        self.channels = channels
        self.total = 0
        self._keys = []
        self._values = []

    def append(self, keys, values):
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.channels or values.shape != keys.shape:
            raise CacheError('cannot append rows of shape %r / %r to a %d channel cache' %
                             (keys.shape, values.shape, self.channels))
        self._keys.append(keys)
        self._values.append(values)
        self.total += len(keys)

    def advance(self, filters):
        pass

    def materialize(self):
        if not self._keys:
            return _empty_rows(self.channels), _empty_rows(self.channels)
        return np.concatenate(self._keys), np.concatenate(self._values)


class DenseKvCache(object):
    def __init__(self, n_layers, channels):
        self.layers = [DenseLayer(channels) for _ in range(n_layers)]
        self.filters = []

    @property
    def total(self):
        return self.layers[0].total if self.layers else 0
