import math
import unittest

import numpy as np

from skvq.cache.sliding import DenseLayer
from skvq.engine.attention import apply_rope, attend, attention_block, rms_norm, softmax
from skvq.engine.model import LayerWeights, ModelConfig
from skvq.exceptions import ModelError


class AttendTestCase(unittest.TestCase):
    config = ModelConfig(n_layers=1, hidden=4, n_heads=1, n_kv_heads=1, vocab=4, mlp_hidden=4)

    def test_hand_computed(self):
        q = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.float64)
        keys = np.array([[1, 0, 0, 0], [0, 2, 0, 0]], dtype=np.float64)
        values = np.array([[1, 2, 3, 4], [5, 6, 7, 8]], dtype=np.float64)
        out = attend(q, keys, values, 0, self.config)

        np.testing.assert_allclose(out[0], values[0], atol=1e-12)
        # second query: scores (0, 2) / sqrt(4)
        w1 = math.e / (1 + math.e)
        np.testing.assert_allclose(out[1], (1 - w1) * values[0] + w1 * values[1], atol=1e-12)

    def test_output_projection(self):
        rng = np.random.default_rng(0)
        q, keys, values = (rng.normal(size=(1, 4)) for _ in range(3))
        w_o = rng.normal(size=(4, 4))
        out = attend(q, keys, values, 0, self.config) @ w_o
        np.testing.assert_allclose(out, values @ w_o, rtol=1e-6)

    def test_uniform_keys(self):
        rng = np.random.default_rng(1)
        n = 6
        q = rng.normal(size=(n, 4))
        keys = np.tile(rng.normal(size=(1, 4)), (n, 1))
        values = rng.normal(size=(n, 4))
        out = attend(q, keys, values, 0, self.config)
        for row in range(n):
            np.testing.assert_allclose(out[row], values[:row + 1].mean(axis=0), atol=1e-12)

    def test_offset_sees_history(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(5, 4))
        keys = rng.normal(size=(5, 4))
        values = rng.normal(size=(5, 4))
        full = attend(q, keys, values, 0, self.config)
        tail = attend(q[3:], keys, values, 3, self.config)
        np.testing.assert_allclose(tail, full[3:], atol=1e-12)

    def test_grouped_query_matches_repeated_heads(self):
        rng = np.random.default_rng(3)
        gqa = ModelConfig(n_layers=1, hidden=16, n_heads=4, n_kv_heads=2, vocab=4, mlp_hidden=4)
        mha = gqa.replace(n_kv_heads=4)
        q = rng.normal(size=(7, 16))
        keys = rng.normal(size=(7, 8))
        values = rng.normal(size=(7, 8))

        def repeat(rows):
            heads = rows.reshape(7, 2, 4)
            return np.repeat(heads, 2, axis=1).reshape(7, 16)

        np.testing.assert_allclose(attend(q, keys, values, 0, gqa), attend(q, repeat(keys), repeat(values), 0, mha),
                                   atol=1e-12)

    def test_shape_errors(self):
        q = np.zeros((2, 4))
        with self.assertRaises(ModelError):
            attend(q, np.zeros((2, 3)), np.zeros((2, 3)), 0, self.config)
        with self.assertRaises(ModelError):
            attend(q, np.zeros((2, 4)), np.zeros((2, 4)), 1, self.config)
        with self.assertRaises(ModelError):
            attend(np.zeros((2, 5)), np.zeros((2, 4)), np.zeros((2, 4)), 0, self.config)


class AttentionBlockTestCase(unittest.TestCase):
    def test_appends_then_attends(self):
        config = ModelConfig(n_layers=1, hidden=8, n_heads=2, n_kv_heads=1, vocab=4, mlp_hidden=4)
        rng = np.random.default_rng(4)
        layer = LayerWeights(*(rng.normal(size=shape).astype(np.float32)
                               for shape in ((8, 8), (8, 4), (8, 4), (8, 8), (8, 4), (4, 8))))
        h = rms_norm(rng.normal(size=(3, 8)).astype(np.float32))
        cache_layer = DenseLayer(4)
        out = attention_block(layer, h, np.arange(3), cache_layer, [], config)
        self.assertEqual(cache_layer.total, 3)
        expected = attend(h @ layer.w_q, h @ layer.w_k, h @ layer.w_v, 0, config) @ layer.w_o
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


class NumericsTestCase(unittest.TestCase):
    def test_softmax_rows(self):
        scores = np.random.default_rng(5).normal(size=(10, 20)) * 50
        scores[0, :] = 1000.0
        weights = softmax(scores)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        self.assertTrue(np.isfinite(weights).all())

    def test_rms_norm(self):
        x = np.array([[3.0, 4.0]])
        np.testing.assert_allclose((rms_norm(x) ** 2).mean(), 1.0, rtol=1e-5)

    def test_rope(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 16)).astype(np.float32)
        rotated = apply_rope(x, np.arange(5), 8, 10000.0)
        np.testing.assert_allclose(rotated[0], x[0], atol=1e-7)
        np.testing.assert_allclose(np.linalg.norm(rotated.reshape(5, 2, 2, 4), axis=2),
                                   np.linalg.norm(x.reshape(5, 2, 2, 4), axis=2), rtol=1e-5)
