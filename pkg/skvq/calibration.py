"""Offline calibration: channel statistics, reorder plan, clipping scales and smoothing factors.

Clipping scales are searched per group by coordinate descent over a fixed grid:
key groups first, then value groups, one pass. Every group of the layer is
quantized while searching (groups not yet visited sit at their current scale)
and the objective is the mean squared error of the attention output after the
output projection, over full-precision prefill traces of the calibration set.
A candidate replaces the current scale only if it is strictly better, and the
search starts from all-ones, so the result never loses to no clipping.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from django.utils.functional import cached_property

from skvq.engine.attention import attend, project_qkv, softmax
from skvq.engine.generate import trace_layers
from skvq.exceptions import CalibrationError, PlanError
from skvq.quant.codecs import make_codec
from skvq.quant.groups import dequantize_array, quantize_array
from skvq.quant.spec import QuantSpec
from skvq.reorder import KMEANS_MAX_ITER, KMEANS_TOLERANCE, ReorderPlan, build_plan, collect_stats

logger = logging.getLogger('skvq.calibration')
json_logger = logging.getLogger('skvq.json.calibration')

SEARCH_METHOD = 'coordinate-descent'


def check_grid(grid):
    grid = [float(alpha) for alpha in grid]
    if not grid:
        raise CalibrationError('clipping grid is empty')
    for alpha in grid:
        if not 0 < alpha <= 1:
            raise CalibrationError('clipping scale %r is outside (0, 1]' % alpha)
    # Scales are stored as float32, so search over exactly the values inference will use.
    return sorted({float(np.float32(alpha)) for alpha in grid} | {1.0})


class ClipSchedule(object):
    """Clipping scales per layer and cache, one float32 per group, bound to the plan they were searched on."""

    def __init__(self, layers, key_spec, value_spec, plan_checksum):
        self.layers = [(np.asarray(key, dtype=np.float32), np.asarray(value, dtype=np.float32))
                       for key, value in layers]
        self.key_spec = key_spec
        self.value_spec = value_spec
        self.plan_checksum = plan_checksum
        self.losses = []
        for key, value in self.layers:
            for alphas in (key, value):
                if np.any(~(alphas > 0)) or np.any(alphas > 1):
                    raise CalibrationError('clipping scales must lie in (0, 1]')

    @classmethod
    def ones(cls, plan, key_spec, value_spec):
        return cls([(np.ones(layer.key.n_groups), np.ones(layer.value.n_groups)) for layer in plan.layers],
                   key_spec, value_spec, plan.checksum())

    @property
    def n_layers(self):
        return len(self.layers)

    def check(self, plan):
        if self.plan_checksum != plan.checksum():
            raise PlanError('clipping schedule was calibrated for a different reorder plan')
        if self.n_layers != plan.n_layers:
            raise PlanError('schedule has %d layers, plan has %d' % (self.n_layers, plan.n_layers))
        for index, ((key, value), layer) in enumerate(zip(self.layers, plan.layers)):
            if len(key) != layer.key.n_groups or len(value) != layer.value.n_groups:
                raise PlanError('layer %d: schedule has %d/%d groups, plan has %d/%d' %
                                (index, len(key), len(value), layer.key.n_groups, layer.value.n_groups))

    def codecs(self, plan):
        self.check(plan)
        return [(make_codec(self.key_spec, layer.key.boundaries, key),
                 make_codec(self.value_spec, layer.value.boundaries, value))
                for (key, value), layer in zip(self.layers, plan.layers)]

    def write(self, writer):
        writer.u32(self.plan_checksum)
        self.key_spec.write(writer)
        self.value_spec.write(writer)
        writer.u32(self.n_layers)
        for key, value in self.layers:
            for alphas in (key, value):
                writer.u32(len(alphas))
                writer.array(alphas, '<f4')

    @classmethod
    def read(cls, reader):
        checksum = reader.u32()
        key_spec = QuantSpec.read(reader)
        value_spec = QuantSpec.read(reader)
        layers = []
        for _ in range(reader.u32()):
            key = reader.array('<f4', reader.u32())
            layers.append((key, reader.array('<f4', reader.u32())))
        return cls(layers, key_spec, value_spec, checksum)

    def __eq__(self, other):
        return (isinstance(other, ClipSchedule) and self.plan_checksum == other.plan_checksum and
                self.key_spec == other.key_spec and self.value_spec == other.value_spec and
                self.n_layers == other.n_layers and
                all(np.array_equal(a, c) and np.array_equal(b, d)
                    for (a, b), (c, d) in zip(self.layers, other.layers)))

    def __ne__(self, other):
        return not self == other


class CalibrationSet(object):
    def __init__(self, sequences):
        self.sequences = [np.asarray(sequence, dtype=np.int64) for sequence in sequences]
        if not self.sequences:
            raise CalibrationError('calibration set is empty')
        for sequence in self.sequences:
            if sequence.ndim != 1 or len(sequence) < 2:
                raise CalibrationError('calibration sequences need at least two tokens')

    @classmethod
    def random(cls, count, length, vocab, seed):
        rng = np.random.default_rng(seed)
        return cls([rng.integers(0, vocab, size=length) for _ in range(count)])

    @classmethod
    def from_file(cls, path):
        """One sequence per line, whitespace-separated token ids; blank and # lines are skipped."""
        try:
            with open(path) as f:
                lines = [line.split() for line in f if line.strip() and not line.lstrip().startswith('#')]
        except IOError as e:
            raise CalibrationError('cannot read calibration set %s: %s' % (path, e.strerror))
        try:
            return cls([[int(token) for token in line] for line in lines])
        except ValueError as e:
            raise CalibrationError('bad token id in %s: %s' % (path, e))

    def require(self, window, vocab):
        shortest = min(len(sequence) for sequence in self.sequences)
        if shortest < window:
            raise CalibrationError('calibration sequences of %d tokens are shorter than the %d token window' %
                                   (shortest, window))
        if max(sequence.max() for sequence in self.sequences) >= vocab:
            raise CalibrationError('calibration set has token ids outside the %d token vocabulary' % vocab)

    @property
    def shape(self):
        return len(self.sequences), max(len(sequence) for sequence in self.sequences)

    def __len__(self):
        return len(self.sequences)


def _projections(model, index, traces):
    layer = model.layers[index]
    for h in traces:
        q, k, v = project_qkv(layer, h, np.arange(len(h)), model.config)
        yield q.astype(np.float64), k.astype(np.float64), v.astype(np.float64)


def fake_quantize(rows, alpha, spec):
    """What attention sees after a quantize/dequantize round trip of one group's columns."""
    codes, params = quantize_array(rows, alpha, spec)
    return dequantize_array(codes, params).astype(np.float32).astype(np.float64)


def evaluate_clip_loss(model, index, codecs, traces):
    """Mean squared error of layer `index`'s attention output with K/V stored through `codecs`."""
    key_codec, value_codec = codecs
    config = model.config
    w_o = model.layers[index].w_o.astype(np.float64)
    error = 0.0
    count = 0
    for q, k, v in _projections(model, index, traces):
        tokens = np.arange(len(q))
        reference = attend(q, k, v, 0, config) @ w_o
        keys = key_codec.decode(key_codec.encode(k, tokens)).astype(np.float64)
        values = value_codec.decode(value_codec.encode(v, tokens)).astype(np.float64)
        quantized = attend(q, keys, values, 0, config) @ w_o
        error += float(((quantized - reference) ** 2).sum())
        count += reference.size
    return error / count


class _LayerSearch(object):
    """Incremental loss bookkeeping for one layer: only the KV head owning a group is recomputed."""

    def __init__(self, model, index, traces, key_spec, value_spec):
        self.config = model.config
        self.key_spec = key_spec
        self.value_spec = value_spec
        w_o = model.layers[index].w_o.astype(np.float64)
        width = self.config.group_ratio * self.config.head_dim
        self.w_o = [w_o[head * width:(head + 1) * width] for head in range(self.config.n_kv_heads)]
        self.sequences = list(_projections(model, index, traces))
        self.count = sum(q.shape[0] * self.config.hidden for q, k, v in self.sequences)

    def head_output(self, q, keys, values, head):
        config = self.config
        hd, rep = config.head_dim, config.group_ratio
        n = len(q)
        q = q[:, head * rep * hd:(head + 1) * rep * hd].reshape(n, rep, hd)
        keys = keys[:, head * hd:(head + 1) * hd]
        values = values[:, head * hd:(head + 1) * hd]
        scores = q.transpose(1, 0, 2) @ keys.T / math.sqrt(hd)
        scores = np.where(np.tri(n, dtype=bool), scores, -np.inf)
        out = (softmax(scores) @ values).transpose(1, 0, 2).reshape(n, rep * hd)
        return out @ self.w_o[head]

    def quantized(self, rows, alphas, boundaries, spec):
        if spec.full_precision:
            return rows
        out = np.empty_like(rows)
        for group, (start, end) in enumerate(zip(boundaries[:-1], boundaries[1:])):
            out[:, start:end] = fake_quantize(rows[:, start:end], alphas[group], spec)
        return out

    def run(self, plan_layer, grid):
        heads = range(self.config.n_kv_heads)
        alphas = {'key': np.ones(plan_layer.key.n_groups), 'value': np.ones(plan_layer.value.n_groups)}
        state = []
        for q, k, v in self.sequences:
            keys = self.quantized(k, alphas['key'], plan_layer.key.boundaries, self.key_spec)
            values = self.quantized(v, alphas['value'], plan_layer.value.boundaries, self.value_spec)
            reference = [self.head_output(q, k, v, head) for head in heads]
            current = [self.head_output(q, keys, values, head) for head in heads]
            diff = sum(c - r for c, r in zip(current, reference))
            state.append({'q': q, 'rows': {'key': k, 'value': v}, 'stored': {'key': keys, 'value': values},
                          'current': current, 'diff': diff})
        before = self.loss(state)
        loss = before

        caches = (('key', plan_layer.key, self.key_spec), ('value', plan_layer.value, self.value_spec))
        for cache, entry, spec in caches:
            if spec.full_precision:
                continue
            for group, (start, end) in enumerate(zip(entry.boundaries[:-1], entry.boundaries[1:])):
                head = start // self.config.head_dim
                best = None
                for alpha in grid:
                    if alpha == alphas[cache][group]:
                        continue
                    trial = self.try_alpha(state, cache, head, start, end, alpha, spec)
                    candidate = sum(float(((item['diff'] - item['current'][head] + out) ** 2).sum())
                                    for item, (out, _) in zip(state, trial)) / self.count
                    if candidate < loss and (best is None or candidate < best[0]):
                        best = (candidate, alpha, trial)
                if best is not None:
                    loss, alphas[cache][group], trial = best
                    for item, (out, columns) in zip(state, trial):
                        item['stored'][cache][:, start:end] = columns
                        item['diff'] = item['diff'] - item['current'][head] + out
                        item['current'][head] = out
        return alphas['key'], alphas['value'], before, loss

    def try_alpha(self, state, cache, head, start, end, alpha, spec):
        trial = []
        for item in state:
            columns = fake_quantize(item['rows'][cache][:, start:end], alpha, spec)
            stored = dict(item['stored'])
            stored[cache] = stored[cache].copy()
            stored[cache][:, start:end] = columns
            out = self.head_output(item['q'], stored['key'], stored['value'], head)
            trial.append((out, columns))
        return trial

    def loss(self, state):
        return sum(float((item['diff'] ** 2).sum()) for item in state) / self.count


def calibrate_alpha(model, plan, key_spec, value_spec, traces, grid, workers=1, progress=None):
    """Search clipping scales for every layer of a model whose weights are already fused with `plan`.

    `traces` are per-layer normalized attention inputs (see trace_layers).
    The returned schedule records (loss before, loss after) per layer in `losses`.
    """
    grid = check_grid(grid)
    plan.check(model.config)

    def search(index):
        return _LayerSearch(model, index, traces[index], key_spec, value_spec).run(plan.layers[index], grid)

    layers = []
    losses = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for index, (key, value, before, after) in enumerate(executor.map(search, range(plan.n_layers))):
            layers.append((key, value))
            losses.append((before, after))
            logger.info('Layer %d: attention MSE %.6g -> %.6g (%d/%d key, %d/%d value groups clipped)',
                        index, before, after, int((key < 1).sum()), len(key), int((value < 1).sum()), len(value))
            json_logger.info(json.dumps({'event': 'layer_calibrated', 'layer': index, 'loss_before': before,
                                         'loss_after': after}, separators=(',', ':')))
            if progress is not None:
                progress.did(1)

    schedule = ClipSchedule(layers, key_spec, value_spec, plan.checksum())
    schedule.losses = losses
    return schedule


def search_group_alpha(values, spec, grid):
    """Clipping scale minimizing the reconstruction MSE of a single group; returns (alpha, {alpha: mse})."""
    values = np.asarray(values, dtype=np.float64)[None, :]
    errors = {}
    for alpha in check_grid(grid):
        errors[alpha] = float(((fake_quantize(values, alpha, spec) - values) ** 2).mean())
    best = 1.0
    for alpha, error in sorted(errors.items()):
        if error < errors[best]:
            best = alpha
    return best, errors


def smoothing_factors(stats, power=1.0):
    """Per-channel factors max|X_c| ** power; channels that are always zero get 1."""
    peak = np.maximum(np.abs(stats.low), np.abs(stats.high))
    return np.where(peak > 0, peak ** power, 1.0).astype(np.float32)


class CalibrationContext(object):
    """Everything calibration derives from one model and calibration set, computed once."""

    def __init__(self, model, calib, key_spec, value_spec, group_size, seed,
                 kmeans_max_iter=KMEANS_MAX_ITER, kmeans_tolerance=KMEANS_TOLERANCE):
        self.model = model
        self.calib = calib
        self.key_spec = key_spec
        self.value_spec = value_spec
        self.group_size = group_size
        self.seed = seed
        self.kmeans_max_iter = kmeans_max_iter
        self.kmeans_tolerance = kmeans_tolerance

    @cached_property
    def traces(self):
        logger.info('Tracing %d calibration sequences', len(self.calib))
        return trace_layers(self.model, self.calib.sequences)

    @cached_property
    def stats(self):
        result = []
        for index in range(self.model.config.n_layers):
            samples = ((k, v) for q, k, v in _projections(self.model, index, self.traces[index]))
            result.append(collect_stats(samples))
        return result

    def plan(self, reorder=True):
        config = self.model.config
        if not reorder:
            return ReorderPlan.identity(config.n_layers, config.n_kv_heads, config.head_dim, self.group_size)
        return build_plan(self.stats, config.n_kv_heads, config.head_dim, self.group_size, self.seed,
                          self.kmeans_max_iter, self.kmeans_tolerance)

    def smoothing(self):
        return [(smoothing_factors(key), smoothing_factors(value)) for key, value in self.stats]

    def calibrate(self, plan, grid, workers=1, progress=None):
        return calibrate_alpha(self.model.fused(plan), plan, self.key_spec, self.value_spec, self.traces, grid,
                               workers, progress)
