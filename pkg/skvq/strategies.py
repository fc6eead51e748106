"""KV-cache quantization strategies: the full method, its ablations and the RTN / smoothing baselines.

A strategy only decides how a cache is built (specs, window, filter rules,
channel order, clipping scales, smoothing); every strategy runs through the same
SlidingKvCache and attention engine.
"""
import logging
from dataclasses import replace

import numpy as np

from skvq.cache.filters import sink_filters
from skvq.cache.sliding import SlidingKvCache
from skvq.calibration import calibrate_alpha
from skvq.exceptions import ConfigError
from skvq.quant.codecs import SmoothedCodec, make_codec
from skvq.quant.groups import GroupParams, quantize_array, quantize_group, quantize_symmetric_array
from skvq.quant.spec import FP8, FP16, QuantSpec, average_bits

logger = logging.getLogger('skvq.eval')


def search_spec(spec):
    """Clipping scales are searched per bitwidth and group size with FP16 parameters, whatever the stored format."""
    return replace(spec, param_format=FP16)


class QuantStrategy(object):
    def __init__(self, name, key_bits=2, value_bits=2, group_size=32, param_format=FP16, window=0, sinks=0,
                 reorder=False, clip=False, symmetric=False, smooth=False):
        self.name = name
        self.key_spec = QuantSpec(key_bits, group_size, param_format)
        self.value_spec = QuantSpec(value_bits, group_size, param_format)
        self.group_size = group_size
        self.window = int(window)
        self.sinks = int(sinks)
        self.reorder = bool(reorder)
        self.clip = bool(clip)
        self.symmetric = bool(symmetric)
        self.smooth = bool(smooth)
        if self.window < 0 or self.sinks < 0:
            raise ConfigError('strategy %s: window and sink count must be non-negative' % name)
        if self.symmetric and self.clip:
            raise ConfigError('strategy %s: symmetric groups are not clipped' % name)
        if self.smooth and (self.reorder or self.clip):
            raise ConfigError('strategy %s: smoothing replaces reorder and clipping' % name)

    def declared_bits(self):
        return (average_bits(self.key_spec, self.symmetric), average_bits(self.value_spec, self.symmetric))

    def _codec(self, spec, entry, alphas, factors):
        codec = make_codec(spec, entry.boundaries, alphas, self.symmetric)
        if factors is not None and not spec.full_precision:
            codec = SmoothedCodec(codec, factors)
        return codec

    def prepare(self, resources):
        """The model to run and one (key codec, value codec) pair per layer."""
        plan = resources.plan(self.reorder)
        model = resources.model.fused(plan) if self.reorder else resources.model
        schedule = resources.schedule(self.reorder, self.key_spec, self.value_spec) if self.clip else None
        smoothing = resources.smoothing() if self.smooth else None
        codecs = []
        for index, layer in enumerate(plan.layers):
            key_alphas = value_alphas = None
            if schedule is not None:
                key_alphas, value_alphas = schedule.layers[index]
            key_factors = value_factors = None
            if smoothing is not None:
                key_factors, value_factors = smoothing[index]
            codecs.append((self._codec(self.key_spec, layer.key, key_alphas, key_factors),
                           self._codec(self.value_spec, layer.value, value_alphas, value_factors)))
        return model, codecs

    def build_cache(self, codecs):
        return SlidingKvCache(codecs, self.window, sink_filters(self.sinks))

    def describe(self):
        return {'strategy': self.name, 'key': str(self.key_spec), 'value': str(self.value_spec),
                'window': self.window, 'sinks': self.sinks, 'reorder': self.reorder, 'clip': self.clip,
                'symmetric': self.symmetric, 'smooth': self.smooth}

    def __repr__(self):
        return '<QuantStrategy %s>' % self.name


class CalibrationResources(object):
    """Plans, clipping schedules and smoothing factors shared by the strategies of one comparison.

    Everything is derived lazily from a CalibrationContext and cached. A loaded
    calibration artifact, when given, supplies the reordered plan, its schedule
    and the smoothing factors instead.
    """

    def __init__(self, context, grid, workers=1, artifact=None):
        self.context = context
        self.model = context.model
        self.grid = grid
        self.workers = workers
        self._plans = {}
        self._schedules = {}
        self._smoothing = None
        if artifact is not None:
            self._plans[True] = artifact.plan
            schedule = artifact.schedule
            self._schedules[True, search_spec(schedule.key_spec), search_spec(schedule.value_spec)] = schedule
            self._smoothing = artifact.smoothing

    def plan(self, reorder):
        if reorder not in self._plans:
            self._plans[reorder] = self.context.plan(reorder)
        return self._plans[reorder]

    def schedule(self, reorder, key_spec, value_spec):
        key_spec, value_spec = search_spec(key_spec), search_spec(value_spec)
        key = (reorder, key_spec, value_spec)
        if key not in self._schedules:
            plan = self.plan(reorder)
            model = self.model.fused(plan) if reorder else self.model
            logger.info('Calibrating clipping scales for %s / %s (%s plan)', key_spec, value_spec,
                        'reordered' if reorder else 'identity')
            self._schedules[key] = calibrate_alpha(model, plan, key_spec, value_spec, self.context.traces, self.grid,
                                                   self.workers)
        return self._schedules[key]

    def smoothing(self):
        if self._smoothing is None:
            self._smoothing = self.context.smoothing()
        return self._smoothing


def rtn_quantize(values, spec, symmetric=False):
    """Round-to-nearest over one group without clipping; returns (codes, params)."""
    values = np.asarray(values, dtype=np.float64)
    if not symmetric:
        return quantize_group(values, 1.0, spec)
    codes, params = quantize_symmetric_array(values[None, :], spec)
    return codes[0], GroupParams(*(field[0] for field in params[:4]), spec)


def smooth_quantize(values, factors, spec):
    """Quantize token rows divided by per-channel factors, one group per row; returns (codes, params).

    Reconstruction is dequantize_array(codes, params) * factors.
    """
    values = np.asarray(values, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if values.ndim != 2 or factors.shape != (values.shape[1],):
        raise ConfigError('%d smoothing factors for rows of shape %r' % (factors.size, values.shape))
    if not np.all(factors > 0):
        raise ConfigError('smoothing factors must be positive')
    return quantize_array(values / factors, 1.0, spec)


def ablation_strategies(key_bits=2, value_bits=2, group_size=32, window=128, sinks=5):
    """Each step adds one component to the previous one, ending at the full method with FP8 parameters."""
    base = dict(key_bits=key_bits, value_bits=value_bits, group_size=group_size)
    ladder = [
        ('rtn', {}),
        ('+window', {'window': window}),
        ('+clip', {'window': window, 'clip': True}),
        ('+reorder', {'window': window, 'clip': True, 'reorder': True}),
        ('+sink', {'window': window, 'clip': True, 'reorder': True, 'sinks': sinks}),
        ('+fp8', {'window': window, 'clip': True, 'reorder': True, 'sinks': sinks, 'param_format': FP8}),
    ]
    strategies = [QuantStrategy(name, **dict(base, **flags)) for name, flags in ladder]
    strategies.append(QuantStrategy('smooth', smooth=True, **base))
    if key_bits != 1 and value_bits != 1:
        strategies.append(QuantStrategy('rtn-sym', symmetric=True, **base))
    return strategies


def strategy_by_name(name, **defaults):
    # the complete method is the ladder step with every FP16 component on
    name = {'skvq': '+sink'}.get(name, name)
    for strategy in ablation_strategies(**defaults):
        if strategy.name == name:
            return strategy
    raise ConfigError('unknown strategy %r' % name)
