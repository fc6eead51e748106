import unittest

import numpy as np

from skvq.exceptions import PlanError, QuantizationError
from skvq.quant.codecs import (GroupCodec, PassthroughCodec, SmoothedCodec, SymmetricGroupCodec, make_codec,
                               read_codec, uniform_boundaries)
from skvq.quant.spec import QuantSpec, TERNARY, average_bits
from skvq.utils.binary import BinaryReader, BinaryWriter


def round_trip(codec):
    writer = BinaryWriter(b'TEST', 1)
    codec.write(writer)
    reader = BinaryReader(writer.getvalue(), b'TEST', (1,))
    result = read_codec(reader)
    reader.finish()
    return result


class GroupCodecTestCase(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.rows = self.rng.normal(size=(6, 64)).astype(np.float32)

    def test_block_layout(self):
        codec = GroupCodec(QuantSpec(2, 32), uniform_boundaries(64, 32))
        chunk = codec.encode(self.rows, np.arange(6))
        block = chunk.block(2, codec)
        self.assertEqual(block.token, 2)
        self.assertEqual(len(block.codes), 16)
        self.assertEqual(len(block.params), 2)
        self.assertEqual(codec.chunk_bytes(chunk), 6 * (16 + 2 * 2 * 2))

    def test_measured_bits_match_formula(self):
        for spec in [QuantSpec(2, 32), QuantSpec(2, 32, 'fp8'), QuantSpec(4, 16), QuantSpec(8, 64, 'fp8')]:
            with self.subTest(spec=str(spec)):
                codec = make_codec(spec, uniform_boundaries(64, spec.group_size))
                chunk = codec.encode(self.rows, np.arange(6))
                self.assertEqual(codec.chunk_bytes(chunk) * 8 / self.rows.size, average_bits(spec))
                self.assertEqual(codec.declared_bits(), average_bits(spec))

    def test_ternary_row_bytes(self):
        codec = GroupCodec(QuantSpec(TERNARY, 64), uniform_boundaries(64, 64))
        chunk = codec.encode(self.rows, np.arange(6))
        self.assertEqual(chunk.payload.shape, (6, 13))

    def test_decode_error_bounded(self):
        codec = GroupCodec(QuantSpec(8, 16), uniform_boundaries(64, 16))
        decoded = codec.decode(codec.encode(self.rows, np.arange(6)))
        self.assertEqual(decoded.dtype, np.float32)
        np.testing.assert_allclose(decoded, self.rows, atol=0.02)

    def test_uneven_groups(self):
        codec = GroupCodec(QuantSpec(4), [0, 5, 6, 40, 64], alphas=[1.0, 0.9, 0.95, 1.0])
        decoded = codec.decode(codec.encode(self.rows, np.arange(6)))
        self.assertEqual(decoded.shape, self.rows.shape)

    def test_bad_boundaries(self):
        for boundaries in ([0, 64, 32], [1, 64], [0, 0, 64]):
            with self.subTest(boundaries=boundaries), self.assertRaises(PlanError):
                GroupCodec(QuantSpec(2), boundaries)

    def test_alpha_count(self):
        with self.assertRaises(PlanError):
            GroupCodec(QuantSpec(2), [0, 32, 64], alphas=[1.0])

    def test_channel_mismatch(self):
        codec = GroupCodec(QuantSpec(2), [0, 32])
        with self.assertRaises(QuantizationError):
            codec.encode(self.rows, np.arange(6))

    def test_serialization(self):
        codecs = [
            PassthroughCodec(64),
            GroupCodec(QuantSpec(2, 32, 'fp8'), [0, 10, 64], alphas=[0.8, 0.92]),
            SymmetricGroupCodec(QuantSpec(4, 32), uniform_boundaries(64, 32)),
            SmoothedCodec(GroupCodec(QuantSpec(2), uniform_boundaries(64, 32)), np.linspace(0.5, 2, 64)),
        ]
        for codec in codecs:
            with self.subTest(codec=repr(codec)):
                self.assertTrue(round_trip(codec).same_as(codec))


class SymmetricGroupCodecTestCase(unittest.TestCase):
    def test_any_chunk_length(self):
        codec = SymmetricGroupCodec(QuantSpec(4, 16), uniform_boundaries(64, 16))
        rows = np.random.default_rng(4).normal(size=(7, 64)).astype(np.float32)
        for count in (1, 3, 4, 7):
            with self.subTest(count=count):
                chunk = codec.encode(rows[:count], np.arange(count))
                self.assertEqual(chunk.n_tokens, count)
                self.assertEqual(chunk.zeros.shape, (count, 0))
                bits = codec.chunk_bytes(chunk) * 8 / (count * 64)
                self.assertEqual(bits, average_bits(codec.spec, symmetric=True))
                bound = np.abs(rows[:count]).max() / 7 / 2 * (1 + 2 ** -10)
                np.testing.assert_allclose(codec.decode(chunk), rows[:count], rtol=0, atol=bound)


class PassthroughCodecTestCase(unittest.TestCase):
    def test_exact(self):
        rows = np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)
        codec = make_codec(QuantSpec(16), [0, 8])
        self.assertIsInstance(codec, PassthroughCodec)
        chunk = codec.encode(rows, [0, 1, 2])
        np.testing.assert_array_equal(codec.decode(chunk), rows)
        self.assertEqual(codec.chunk_bytes(chunk), 3 * 8 * 2)


class SmoothedCodecTestCase(unittest.TestCase):
    def test_unit_factors_match_plain(self):
        rows = np.random.default_rng(1).normal(size=(4, 32)).astype(np.float32)
        plain = GroupCodec(QuantSpec(2), [0, 32])
        smoothed = SmoothedCodec(plain, np.ones(32))
        np.testing.assert_array_equal(smoothed.decode(smoothed.encode(rows, np.arange(4))),
                                      plain.decode(plain.encode(rows, np.arange(4))))

    def test_lossless_inner(self):
        rows = np.random.default_rng(2).normal(size=(4, 8)).astype(np.float32)
        factors = np.array([1, 2, 4, 8, 0.5, 0.25, 1, 16], dtype=np.float32)
        codec = SmoothedCodec(PassthroughCodec(8), factors)
        np.testing.assert_array_equal(codec.decode(codec.encode(rows, np.arange(4))), rows)

    def test_factors_positive(self):
        with self.assertRaises(PlanError):
            SmoothedCodec(PassthroughCodec(2), [1.0, 0.0])
