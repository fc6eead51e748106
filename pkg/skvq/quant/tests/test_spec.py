import unittest

from skvq.exceptions import QuantizationError
from skvq.quant.spec import QuantSpec, TERNARY, average_bits, parse_bits
from skvq.utils.binary import BinaryReader, BinaryWriter


class AverageBitsTestCase(unittest.TestCase):
    def test_golden_numbers(self):
        self.assertEqual(average_bits(QuantSpec(2, 32, 'fp16')), 3.0)
        self.assertEqual(average_bits(QuantSpec(2, 32, 'fp8')), 2.5)
        self.assertEqual(average_bits(QuantSpec(2, 64, 'fp8')), 2.25)

    def test_symmetric_counts_one_parameter(self):
        self.assertEqual(average_bits(QuantSpec(2, 64, 'fp16'), symmetric=True), 2.25)

    def test_ternary(self):
        self.assertAlmostEqual(average_bits(QuantSpec(TERNARY, 64, 'fp8')), 1.6 + 2 * 8 / 64)

    def test_full_precision(self):
        self.assertEqual(average_bits(QuantSpec(16, 32)), 16.0)


class QuantSpecTestCase(unittest.TestCase):
    def test_parse_bits(self):
        for text, expected in [('2', 2), ('ternary', TERNARY), ('1.5', TERNARY), (1.5, TERNARY), (4.0, 4), ('16', 16)]:
            with self.subTest(text=text):
                self.assertEqual(parse_bits(text), expected)

    def test_invalid(self):
        for kwargs in [{'bits': 5}, {'bits': 'two'}, {'group_size': 0}, {'param_format': 'bf16'}, {'bits': 2.5}]:
            with self.subTest(**kwargs), self.assertRaises(QuantizationError):
                QuantSpec(**kwargs)

    def test_code_range(self):
        self.assertEqual(QuantSpec(2).code_max, 3)
        self.assertEqual(QuantSpec(8).code_max, 255)
        self.assertEqual(QuantSpec(TERNARY).code_max, 2)

    def test_dict_round_trip(self):
        for spec in [QuantSpec(), QuantSpec(TERNARY, 64, 'fp8'), QuantSpec(16, 1)]:
            with self.subTest(spec=str(spec)):
                self.assertEqual(QuantSpec.from_dict(spec.to_dict()), spec)

    def test_binary_round_trip(self):
        spec = QuantSpec(TERNARY, 128, 'fp8')
        writer = BinaryWriter(b'TEST', 1)
        spec.write(writer)
        reader = BinaryReader(writer.getvalue(), b'TEST', (1,))
        self.assertEqual(QuantSpec.read(reader), spec)
        reader.finish()
