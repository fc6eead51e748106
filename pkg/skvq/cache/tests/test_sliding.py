import unittest

import numpy as np

from skvq.cache.filters import AttentionSinkRule, FilterRule, retained_mask, sink_filters
from skvq.cache.sliding import CacheLayer, SlidingKvCache
from skvq.exceptions import CacheError
from skvq.quant.codecs import GroupCodec, PassthroughCodec, uniform_boundaries
from skvq.quant.spec import QuantSpec, average_bits

CHANNELS = 8


def codecs(bits=2, group_size=4, n_layers=1):
    spec = QuantSpec(bits, group_size)
    return [(GroupCodec(spec, uniform_boundaries(CHANNELS, group_size)),
             GroupCodec(spec, uniform_boundaries(CHANNELS, group_size))) for _ in range(n_layers)]


def step(cache, keys, values):
    for layer in cache.layers:
        layer.append(keys, values)
        layer.advance(cache.filters)


class OddTokens(FilterRule):
    name = 'odd'

    def retain(self, tokens, keys, values, context_length):
        return np.asarray(tokens) % 2 == 1


class SlidingWindowTestCase(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.keys = rng.normal(size=(11, CHANNELS)).astype(np.float32)
        self.values = rng.normal(size=(11, CHANNELS)).astype(np.float32)

    def test_prefill_then_decode_trace(self):
        cache = SlidingKvCache(codecs(), window=4, filters=sink_filters(2))
        layer = cache.layers[0]

        step(cache, self.keys[:10], self.values[:10])
        self.assertEqual(cache.total, 10)
        self.assertEqual(cache.processed, 6)
        self.assertEqual(cache.retained_tokens(), [0, 1])
        self.assertEqual(layer.quantized_tokens().tolist(), [2, 3, 4, 5])
        np.testing.assert_array_equal(layer.window_keys, self.keys[6:10])

        step(cache, self.keys[10:], self.values[10:])
        self.assertEqual(cache.processed, 7)
        self.assertEqual(layer.quantized_tokens().tolist(), [2, 3, 4, 5, 6])
        self.assertEqual(layer.key_chunks[-1].tokens.tolist(), [6])
        self.assertEqual(cache.retained_tokens(), [0, 1])

    def test_window_exact_at_every_step(self):
        cache = SlidingKvCache(codecs(), window=3, filters=sink_filters(1))
        for token in range(11):
            with self.subTest(token=token):
                step(cache, self.keys[token:token + 1], self.values[token:token + 1])
                keys, values = cache.layers[0].materialize()
                self.assertEqual(len(keys), token + 1)
                tail = min(3, token + 1)
                np.testing.assert_array_equal(keys[-tail:], self.keys[token + 1 - tail:token + 1])
                np.testing.assert_array_equal(values[-tail:], self.values[token + 1 - tail:token + 1])
                np.testing.assert_array_equal(keys[0], self.keys[0])
                self.assertEqual(cache.processed, max(0, token + 1 - 3))

    def test_short_context_is_noop(self):
        cache = SlidingKvCache(codecs(), window=16)
        step(cache, self.keys, self.values)
        self.assertEqual(cache.processed, 0)
        keys, values = cache.layers[0].materialize()
        np.testing.assert_array_equal(keys, self.keys)
        np.testing.assert_array_equal(values, self.values)

    def test_append_only(self):
        layer = CacheLayer(*codecs()[0], window=4)
        layer.append(self.keys[:1], self.values[:1])
        self.assertEqual((layer.total, layer.processed, len(layer.window_keys)), (1, 0, 1))

    def test_split_appends_match_single_append(self):
        whole = CacheLayer(*codecs()[0], window=2)
        whole.append(self.keys[:5], self.values[:5])
        split = CacheLayer(*codecs()[0], window=2)
        split.append(self.keys[:3], self.values[:3])
        split.append(self.keys[3:5], self.values[3:5])
        self.assertTrue(whole.same_state(split))

        whole.advance([])
        split = CacheLayer(*codecs()[0], window=2)
        split.append(self.keys[:3], self.values[:3])
        split.advance([])
        split.append(self.keys[3:5], self.values[3:5])
        split.advance([])
        self.assertTrue(whole.same_state(split))
        np.testing.assert_array_equal(whole.materialize()[0], split.materialize()[0])

    def test_materialize_idempotent(self):
        cache = SlidingKvCache(codecs(), window=2)
        step(cache, self.keys, self.values)
        first = cache.layers[0].materialize()
        second = cache.layers[0].materialize()
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        self.assertEqual(cache.processed, 9)

    def test_history_is_decoded_from_stored_chunks(self):
        cache = SlidingKvCache(codecs(), window=3, filters=sink_filters(1))
        layer = cache.layers[0]
        for token in range(11):
            step(cache, self.keys[token:token + 1], self.values[token:token + 1])
        self.assertEqual([chunk.tokens.tolist() for chunk in layer.key_chunks], [[token] for token in range(1, 8)])
        arrays = sorted(name for name, value in vars(layer).items() if isinstance(value, np.ndarray))
        self.assertEqual(arrays, ['window_keys', 'window_values'])

        zeroed = layer.key_chunks[2]._replace(payload=np.zeros_like(layer.key_chunks[2].payload))
        layer.key_chunks[2] = zeroed
        keys, values = layer.materialize()
        np.testing.assert_array_equal(keys[3], layer.key_codec.decode(zeroed)[0])
        np.testing.assert_array_equal(keys[0], self.keys[0])
        np.testing.assert_array_equal(keys[8:], self.keys[8:])
        # Reading merges the chunks without changing what they hold.
        self.assertEqual(len(layer.key_chunks), 1)
        self.assertEqual(layer.quantized_tokens().tolist(), list(range(1, 8)))
        np.testing.assert_array_equal(layer.materialize()[0], keys)

    def test_exact_grid_round_trip(self):
        rng = np.random.default_rng(1)
        rows = rng.integers(0, 256, size=(6, CHANNELS)).astype(np.float32)
        rows[:, [0, 4]] = 0
        rows[:, [1, 5]] = 255
        cache = SlidingKvCache(codecs(bits=8), window=0)
        step(cache, rows, rows)
        keys, values = cache.layers[0].materialize()
        np.testing.assert_array_equal(keys, rows)
        np.testing.assert_array_equal(values, rows)

    def test_sink_rows_exact(self):
        cache = SlidingKvCache(codecs(), window=0, filters=sink_filters(2))
        step(cache, self.keys, self.values)
        keys, values = cache.layers[0].materialize()
        np.testing.assert_array_equal(keys[:2], self.keys[:2])
        np.testing.assert_array_equal(values[:2], self.values[:2])
        self.assertFalse(np.array_equal(keys[2:], self.keys[2:]))

    def test_any_rule_retains(self):
        cache = SlidingKvCache(codecs(), window=2, filters=[AttentionSinkRule(2), OddTokens()])
        step(cache, self.keys, self.values)
        self.assertEqual(cache.retained_tokens(), [0, 1, 3, 5, 7])
        self.assertEqual(cache.layers[0].quantized_tokens().tolist(), [2, 4, 6, 8])
        mask = retained_mask([OddTokens()], np.arange(4), None, None, 4)
        self.assertEqual(mask.tolist(), [False, True, False, True])

    def test_errors(self):
        with self.assertRaises(CacheError):
            CacheLayer(*codecs()[0], window=-1)
        with self.assertRaises(CacheError):
            AttentionSinkRule(-1)
        layer = CacheLayer(*codecs()[0], window=2)
        with self.assertRaises(CacheError):
            layer.append(np.zeros((1, CHANNELS + 1)), np.zeros((1, CHANNELS + 1)))
        with self.assertRaises(CacheError):
            CacheLayer(PassthroughCodec(CHANNELS), PassthroughCodec(CHANNELS + 1), window=2)


class CacheStatsTestCase(unittest.TestCase):
    def test_measured_bits(self):
        rng = np.random.default_rng(2)
        for bits, group_size in ((2, 4), (4, 8), (8, 2)):
            with self.subTest(bits=bits, group_size=group_size):
                cache = SlidingKvCache(codecs(bits, group_size, n_layers=2), window=3, filters=sink_filters(1))
                step(cache, rng.normal(size=(12, CHANNELS)), rng.normal(size=(12, CHANNELS)))
                stats = cache.stats()
                for name in ('key', 'value'):
                    self.assertEqual(stats[name].quantized_tokens, 2 * 8)
                    self.assertEqual(stats[name].retained_tokens, 2 * 1)
                    self.assertEqual(stats[name].window_tokens, 2 * 3)
                    self.assertEqual(stats[name].quantized_bits, average_bits(QuantSpec(bits, group_size)))
                    self.assertEqual(stats[name].fp_bytes, 2 * 4 * CHANNELS * 2)

    def test_passthrough_is_sixteen_bits(self):
        cache = SlidingKvCache([(PassthroughCodec(CHANNELS), PassthroughCodec(CHANNELS))], window=1)
        step(cache, np.ones((5, CHANNELS)), np.ones((5, CHANNELS)))
        stats = cache.stats()['key']
        self.assertEqual(stats.quantized_bits, 16.0)
        self.assertEqual(stats.bits_per_element, 16.0)
