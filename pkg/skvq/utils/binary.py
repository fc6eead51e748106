import struct
import zlib

import numpy as np

from skvq.exceptions import FormatError

u8_pack = struct.Struct('<B')
u16_pack = struct.Struct('<H')
u32_pack = struct.Struct('<I')
u64_pack = struct.Struct('<Q')
f64_pack = struct.Struct('<d')
assert u32_pack.size == 4

MAGIC_SIZE = 4


class BinaryWriter(object):
    """Little-endian record writer shared by the model, artifact and snapshot formats.

    The file is magic + u16 version + body + u32 CRC32 over everything before it.
    """

    def __init__(self, magic, version):
        assert len(magic) == MAGIC_SIZE
        self.parts = [magic, u16_pack.pack(version)]

    def u8(self, value):
        self.parts.append(u8_pack.pack(value))

    def u32(self, value):
        self.parts.append(u32_pack.pack(value))

    def u64(self, value):
        self.parts.append(u64_pack.pack(value))

    def f64(self, value):
        self.parts.append(f64_pack.pack(value))

    def blob(self, data):
        self.u32(len(data))
        self.parts.append(bytes(data))

    def string(self, text):
        self.blob(text.encode('utf-8'))

    def array(self, values, dtype):
        self.parts.append(np.ascontiguousarray(values, dtype=np.dtype(dtype).newbyteorder('<')).tobytes())

    def raw(self, data):
        self.parts.append(bytes(data))

    def getvalue(self):
        body = b''.join(self.parts)
        return body + u32_pack.pack(zlib.crc32(body))

    def write(self, path):
        data = self.getvalue()
        with open(path, 'wb') as f:
            f.write(data)
        return data


class BinaryReader(object):
    def __init__(self, data, magic, versions):
        name = magic.decode('ascii')
        if len(data) < MAGIC_SIZE + u16_pack.size + u32_pack.size:
            raise FormatError('%s file truncated (%d bytes)' % (name, len(data)))
        if data[:MAGIC_SIZE] != magic:
            raise FormatError('bad magic %r, expected %r' % (bytes(data[:MAGIC_SIZE]), magic))

        self.body = data[:-u32_pack.size]
        expected = u32_pack.unpack(data[-u32_pack.size:])[0]
        if zlib.crc32(self.body) != expected:
            raise FormatError('%s checksum mismatch, file is corrupt or truncated' % name)

        self.offset = MAGIC_SIZE
        self.version = self.u16()
        if self.version not in versions:
            raise FormatError('unsupported %s format version %d' % (name, self.version))

    @classmethod
    def from_path(cls, path, magic, versions):
        try:
            with open(path, 'rb') as f:
                data = f.read()
        except IOError as e:
            raise FormatError('cannot read %s: %s' % (path, e.strerror))
        return cls(data, magic, versions)

    def _take(self, size):
        if self.offset + size > len(self.body):
            raise FormatError('record runs past end of file at offset %d' % self.offset)
        data = self.body[self.offset:self.offset + size]
        self.offset += size
        return data

    def _unpack(self, pack):
        return pack.unpack(self._take(pack.size))[0]

    def u8(self):
        return self._unpack(u8_pack)

    def u16(self):
        return self._unpack(u16_pack)

    def u32(self):
        return self._unpack(u32_pack)

    def u64(self):
        return self._unpack(u64_pack)

    def f64(self):
        return self._unpack(f64_pack)

    def raw(self, size):
        return self._take(size)

    def blob(self):
        return self._take(self.u32())

    def string(self):
        return self.blob().decode('utf-8')

    def array(self, dtype, count):
        dtype = np.dtype(dtype).newbyteorder('<')
        return np.frombuffer(self._take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder('='))

    def finish(self):
        if self.offset != len(self.body):
            raise FormatError('%d trailing bytes after last record' % (len(self.body) - self.offset))
