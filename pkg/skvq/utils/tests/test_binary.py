import unittest

import numpy as np

from skvq.exceptions import FormatError
from skvq.utils.binary import BinaryReader, BinaryWriter


def sample():
    writer = BinaryWriter(b'TEST', 2)
    writer.u8(7)
    writer.u32(123456)
    writer.f64(0.1)
    writer.string('héllo')
    writer.array([1.5, -2.0], '<f4')
    return writer.getvalue()


class BinaryTestCase(unittest.TestCase):
    def test_round_trip(self):
        reader = BinaryReader(sample(), b'TEST', (2,))
        self.assertEqual(reader.version, 2)
        self.assertEqual(reader.u8(), 7)
        self.assertEqual(reader.u32(), 123456)
        self.assertEqual(reader.f64(), 0.1)
        self.assertEqual(reader.string(), 'héllo')
        np.testing.assert_array_equal(reader.array('<f4', 2), [1.5, -2.0])
        reader.finish()

    def test_every_byte_flip_detected(self):
        data = sample()
        for offset in range(len(data)):
            with self.subTest(offset=offset):
                corrupt = bytearray(data)
                corrupt[offset] ^= 0x10
                with self.assertRaises(FormatError):
                    BinaryReader(bytes(corrupt), b'TEST', (2,))

    def test_truncated(self):
        data = sample()
        for size in (0, 5, len(data) - 1):
            with self.subTest(size=size), self.assertRaises(FormatError):
                BinaryReader(data[:size], b'TEST', (2,))

    def test_bad_magic_and_version(self):
        with self.assertRaises(FormatError):
            BinaryReader(sample(), b'NOPE', (2,))
        with self.assertRaises(FormatError):
            BinaryReader(sample(), b'TEST', (1,))

    def test_read_past_end(self):
        reader = BinaryReader(sample(), b'TEST', (2,))
        reader.raw(len(reader.body) - reader.offset)
        with self.assertRaises(FormatError):
            reader.u8()

    def test_trailing_bytes(self):
        reader = BinaryReader(sample(), b'TEST', (2,))
        reader.u8()
        with self.assertRaises(FormatError):
            reader.finish()
