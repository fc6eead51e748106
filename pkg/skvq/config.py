"""Run configuration: a flat `key = value` file layered over the SKVQ_* settings.

Priority, lowest first: settings defaults, the config file, `--set` overrides and
named command-line flags. `RunConfig.parse(cfg.serialize()) == cfg` for every
valid configuration.
"""
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from django.conf import settings

from skvq.exceptions import ConfigError, QuantizationError
from skvq.quant.spec import PARAM_BITS, QuantSpec, parse_bits


def _bits(text):
    try:
        return parse_bits(text)
    except QuantizationError as e:
        raise ConfigError(e.message)


def _bool(text):
    value = text.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError('not a boolean: %r' % text)


def _path(text):
    return text.strip() or None


def _tuple(item):
    def parse(text):
        return tuple(item(part.strip()) for part in text.split(',') if part.strip())
    return parse


def _param_format(text):
    value = text.strip().lower()
    if value not in PARAM_BITS:
        raise ValueError('expected one of %s' % ', '.join(sorted(PARAM_BITS)))
    return value


def _format(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(_format(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _setting(name, default=None):
    return lambda: getattr(settings, name, default)


def _option(parser, setting=None, default=None):
    if setting is not None:
        return field(default_factory=_setting(setting, default), metadata={'parse': parser})
    return field(default=default, metadata={'parse': parser})


@dataclass(frozen=True)
class RunConfig:
    # files
    model: Optional[str] = _option(_path)
    artifact: Optional[str] = _option(_path)
    dataset: Optional[str] = _option(_path)
    output: Optional[str] = _option(_path)
    snapshot: Optional[str] = _option(_path)
    # quantization
    key_bits: object = _option(_bits, 'SKVQ_KEY_BITS', 2)
    value_bits: object = _option(_bits, 'SKVQ_VALUE_BITS', 2)
    group_size: int = _option(int, 'SKVQ_GROUP_SIZE', 32)
    param_format: str = _option(_param_format, 'SKVQ_PARAM_FORMAT', 'fp16')
    window: int = _option(int, 'SKVQ_WINDOW', 128)
    sinks: int = _option(int, 'SKVQ_SINKS', 5)
    # calibration
    alpha_grid: Tuple[float, ...] = _option(_tuple(float), 'SKVQ_ALPHA_GRID', (1.0,))
    calib_sequences: int = _option(int, 'SKVQ_CALIBRATION_SEQUENCES', 8)
    calib_length: int = _option(int, 'SKVQ_CALIBRATION_LENGTH', 512)
    reorder: bool = _option(_bool, default=True)
    kmeans_max_iter: int = _option(int, 'SKVQ_KMEANS_MAX_ITER', 100)
    kmeans_tolerance: float = _option(float, 'SKVQ_KMEANS_TOLERANCE', 1e-6)
    seed: int = _option(int, 'SKVQ_SEED', 0)
    workers: int = _option(int, 'SKVQ_WORKERS', 1)
    # generation and evaluation
    prompt: Tuple[int, ...] = _option(_tuple(int), default=(1, 2, 3, 4))
    n_new: int = _option(int, default=16)
    strategies: Tuple[str, ...] = _option(_tuple(str), default=())
    eval_seeds: Tuple[int, ...] = _option(_tuple(int), 'SKVQ_EVAL_SEEDS', (0,))
    eval_sequences: int = _option(int, 'SKVQ_EVAL_SEQUENCES', 2)
    eval_length: int = _option(int, 'SKVQ_EVAL_LENGTH', 384)
    prefill: int = _option(int, 'SKVQ_EVAL_PREFILL', 16)
    decode_chunk: int = _option(int, 'SKVQ_DECODE_CHUNK', 1)
    # roofline
    peak_flops: float = _option(float, 'SKVQ_ROOFLINE_PEAK_FLOPS', 312e12)
    bandwidth: float = _option(float, 'SKVQ_ROOFLINE_BANDWIDTH', 2.039e12)
    capacity: float = _option(float, 'SKVQ_ROOFLINE_CAPACITY', 80e9)
    batches: Tuple[int, ...] = _option(_tuple(int), default=(1, 64, 128))
    seqs: Tuple[int, ...] = _option(_tuple(int), default=(32000, 128000, 200000))

    def __post_init__(self):
        object.__setattr__(self, 'key_bits', _bits(self.key_bits))
        object.__setattr__(self, 'value_bits', _bits(self.value_bits))
        for name in ('alpha_grid', 'prompt', 'strategies', 'eval_seeds', 'batches', 'seqs'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, 'alpha_grid', tuple(float(alpha) for alpha in self.alpha_grid))
        if self.window < 0 or self.sinks < 0:
            raise ConfigError('window and sinks must be non-negative')
        for name in ('group_size', 'calib_sequences', 'calib_length', 'eval_sequences', 'kmeans_max_iter',
                     'workers', 'decode_chunk', 'prefill'):
            if getattr(self, name) < 1:
                raise ConfigError('%s must be at least 1, got %r' % (name, getattr(self, name)))
        if self.eval_length < 2:
            raise ConfigError('eval_length must be at least 2')
        if self.n_new < 0:
            raise ConfigError('n_new must be non-negative')
        if not self.alpha_grid or not all(0 < alpha <= 1 for alpha in self.alpha_grid):
            raise ConfigError('alpha_grid values must lie in (0, 1]')
        if not self.eval_seeds:
            raise ConfigError('eval_seeds is empty')

    @property
    def key_spec(self):
        return QuantSpec(self.key_bits, self.group_size, self.param_format)

    @property
    def value_spec(self):
        return QuantSpec(self.value_bits, self.group_size, self.param_format)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def _convert(cls, key, text):
        known = {f.name: f for f in fields(cls)}
        if key not in known:
            raise ConfigError('unknown configuration key %r' % key)
        try:
            return known[key].metadata['parse'](text)
        except (TypeError, ValueError) as e:
            raise ConfigError('bad value %r for %s: %s' % (text, key, e))

    @classmethod
    def parse(cls, text, base=None):
        """Read `key = value` lines on top of `base` (settings defaults if omitted)."""
        values = {}
        for number, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise ConfigError('line %d: expected key = value, got %r' % (number, line))
            values[key.strip()] = cls._convert(key.strip(), value.strip())
        return (base or cls()).replace(**values)

    @classmethod
    def load(cls, path, base=None):
        try:
            with open(path) as f:
                return cls.parse(f.read(), base)
        except IOError as e:
            raise ConfigError('cannot read config %s: %s' % (path, e.strerror))

    def override(self, assignments):
        """Apply `key=value` strings, as given to --set."""
        values = {}
        for assignment in assignments:
            key, sep, value = assignment.partition('=')
            if not sep:
                raise ConfigError('expected key=value, got %r' % assignment)
            values[key.strip()] = self._convert(key.strip(), value.strip())
        return self.replace(**values)

    def serialize(self):
        lines = []
        for f in fields(self):
            lines.append('%s = %s' % (f.name, _format(getattr(self, f.name))))
        return '\n'.join(lines) + '\n'

    def replace(self, **changes):
        return replace(self, **changes)
