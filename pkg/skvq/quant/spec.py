from dataclasses import dataclass, replace

from skvq.exceptions import QuantizationError

TERNARY = 'ternary'
FULL_PRECISION_BITS = 16
INTEGER_BITS = (1, 2, 3, 4, 8)

FP16 = 'fp16'
FP8 = 'fp8'
PARAM_BITS = {FP16: 16, FP8: 8}

# 3 levels packed 5 per byte
TERNARY_ELEMENT_BITS = 8 / 5

_TERNARY_ALIASES = {TERNARY, 't', '1.5', '1.6'}


def parse_bits(value):
    if isinstance(value, str):
        text = value.strip().lower()
        if text in _TERNARY_ALIASES:
            return TERNARY
        try:
            value = int(text)
        except ValueError:
            raise QuantizationError('invalid bitwidth %r' % value)
    if isinstance(value, float):
        if value == 1.5:
            return TERNARY
        if not value.is_integer():
            raise QuantizationError('invalid bitwidth %r' % value)
        value = int(value)
    if value not in INTEGER_BITS and value != FULL_PRECISION_BITS:
        raise QuantizationError('unsupported bitwidth %r, expected one of 1, 2, 3, 4, 8, 16 or ternary' % value)
    return value


@dataclass(frozen=True)
class QuantSpec:
    bits: object = 2
    group_size: int = 32
    param_format: str = FP16

    def __post_init__(self):
        object.__setattr__(self, 'bits', parse_bits(self.bits))
        if int(self.group_size) != self.group_size or self.group_size < 1:
            raise QuantizationError('group size must be a positive integer, got %r' % self.group_size)
        object.__setattr__(self, 'group_size', int(self.group_size))
        param_format = str(self.param_format).lower()
        if param_format not in PARAM_BITS:
            raise QuantizationError('unknown parameter format %r' % self.param_format)
        object.__setattr__(self, 'param_format', param_format)

    @property
    def ternary(self):
        return self.bits == TERNARY

    @property
    def full_precision(self):
        return self.bits == FULL_PRECISION_BITS

    @property
    def levels(self):
        return 3 if self.ternary else 2 ** self.bits

    @property
    def code_max(self):
        return self.levels - 1

    @property
    def element_bits(self):
        return TERNARY_ELEMENT_BITS if self.ternary else float(self.bits)

    @property
    def param_bits(self):
        return PARAM_BITS[self.param_format]

    @property
    def key(self):
        return TERNARY if self.ternary else str(self.bits)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {'bits': self.key, 'group_size': self.group_size, 'param_format': self.param_format}

    @classmethod
    def from_dict(cls, data):
        return cls(bits=data['bits'], group_size=data['group_size'], param_format=data['param_format'])

    def write(self, writer):
        writer.u8(0 if self.ternary else self.bits)
        writer.u32(self.group_size)
        writer.u8(self.param_bits)

    @classmethod
    def read(cls, reader):
        bits = reader.u8()
        group_size = reader.u32()
        param_bits = reader.u8()
        formats = {value: name for name, value in PARAM_BITS.items()}
        if param_bits not in formats:
            raise QuantizationError('unknown parameter width %d' % param_bits)
        return cls(bits=TERNARY if bits == 0 else bits, group_size=group_size, param_format=formats[param_bits])

    def __str__(self):
        return '%s-bit/g%d/%s' % (self.key, self.group_size, self.param_format)


def average_bits(spec, symmetric=False):
    """Storage bits per cache element including the per-group parameter overhead.

    Asymmetric groups carry a scale and a zero-point, symmetric ones only a scale.
    """
    if spec.full_precision:
        return float(FULL_PRECISION_BITS)
    n_params = 1 if symmetric else 2
    return spec.element_bits + n_params * spec.param_bits / spec.group_size
