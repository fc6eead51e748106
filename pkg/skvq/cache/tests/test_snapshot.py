import os
import tempfile
import unittest

import numpy as np

from skvq.cache.filters import FilterRule, sink_filters
from skvq.cache.sliding import SlidingKvCache
from skvq.cache.snapshot import read_snapshot, write_snapshot
from skvq.exceptions import CacheError, FormatError
from skvq.quant.codecs import GroupCodec, PassthroughCodec, SmoothedCodec, SymmetricGroupCodec
from skvq.quant.spec import QuantSpec

CHANNELS = 8


def mixed_codecs():
    spec = QuantSpec(2, 4)
    return [
        (GroupCodec(spec, [0, 3, 8], [0.9, 1.0]), SymmetricGroupCodec(spec, [0, 4, 8])),
        (SmoothedCodec(GroupCodec(QuantSpec(4, 8, 'fp8'), [0, 8]), np.linspace(0.5, 2.0, CHANNELS)),
         PassthroughCodec(CHANNELS)),
    ]


def fill(cache, rng, chunks):
    for size in chunks:
        keys = rng.normal(size=(size, CHANNELS))
        values = rng.normal(size=(size, CHANNELS))
        for layer in cache.layers:
            layer.append(keys, values)
            layer.advance(cache.filters)


class EveryOther(FilterRule):
    name = 'every_other'

    def retain(self, tokens, keys, values, context_length):
        return np.asarray(tokens) % 2 == 0


class SnapshotTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.dir.name, 'cache.skvq')

    def tearDown(self):
        self.dir.cleanup()

    def check_round_trip(self, cache):
        write_snapshot(cache, self.path)
        restored = read_snapshot(self.path)
        self.assertTrue(restored.same_state(cache))
        for mine, theirs in zip(cache.layers, restored.layers):
            for expected, got in zip(mine.materialize(), theirs.materialize()):
                np.testing.assert_array_equal(got, expected)
        return restored

    def test_empty(self):
        cache = SlidingKvCache(mixed_codecs(), window=4, filters=sink_filters(2))
        restored = self.check_round_trip(cache)
        self.assertEqual(restored.total, 0)
        self.assertEqual(restored.window, 4)

    def test_mid_decode(self):
        cache = SlidingKvCache(mixed_codecs(), window=4, filters=sink_filters(2))
        fill(cache, np.random.default_rng(0), [10, 1, 1, 3])
        self.assertEqual(cache.processed, 11)
        self.check_round_trip(cache)

    def test_restored_cache_keeps_decoding(self):
        cache = SlidingKvCache(mixed_codecs(), window=3, filters=sink_filters(1))
        fill(cache, np.random.default_rng(1), [7])
        cache.snapshot(self.path)
        restored = SlidingKvCache.restore(self.path)
        fill(cache, np.random.default_rng(2), [1, 1, 2])
        fill(restored, np.random.default_rng(2), [1, 1, 2])
        self.assertTrue(restored.same_state(cache))

    def test_no_sinks(self):
        cache = SlidingKvCache(mixed_codecs(), window=0)
        fill(cache, np.random.default_rng(3), [5])
        self.check_round_trip(cache)

    def test_truncated(self):
        cache = SlidingKvCache(mixed_codecs(), window=2, filters=sink_filters(1))
        fill(cache, np.random.default_rng(4), [6])
        data = write_snapshot(cache, self.path)
        for size in (0, 5, len(data) // 2, len(data) - 1):
            with self.subTest(size=size):
                with open(self.path, 'wb') as f:
                    f.write(data[:size])
                with self.assertRaises(FormatError):
                    read_snapshot(self.path)

    def test_corrupted(self):
        cache = SlidingKvCache(mixed_codecs(), window=2, filters=sink_filters(1))
        fill(cache, np.random.default_rng(5), [6])
        data = bytearray(write_snapshot(cache, self.path))
        data[len(data) // 3] ^= 0x10
        with open(self.path, 'wb') as f:
            f.write(bytes(data))
        with self.assertRaises(FormatError):
            read_snapshot(self.path)

    def test_custom_rule_rejected(self):
        cache = SlidingKvCache(mixed_codecs(), window=2, filters=[EveryOther()])
        with self.assertRaises(CacheError):
            write_snapshot(cache, self.path)

    def test_tokens_must_cover_processed(self):
        for damage in ('chunk', 'retained'):
            with self.subTest(damage=damage):
                cache = SlidingKvCache(mixed_codecs(), window=2, filters=sink_filters(1))
                fill(cache, np.random.default_rng(6), [6])
                layer = cache.layers[0]
                if damage == 'chunk':
                    chunk = layer.key_chunks[0]
                    layer.key_chunks[0] = chunk._replace(tokens=chunk.tokens + 10)
                else:
                    layer.retained[12] = layer.retained.pop(0)
                write_snapshot(cache, self.path)
                with self.assertRaisesRegex(FormatError, 'exactly once'):
                    read_snapshot(self.path)
