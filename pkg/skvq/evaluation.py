"""Paired comparisons of quantization strategies against the full-precision reference.

Every strategy decodes the same token sequences teacher-forced through the same
engine. A cell reports the mean squared error of every layer's attention output
against the full-precision run, the perplexity of the sequences and the bits per
element measured from the bytes the cache actually holds.
"""
import csv
import json
import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from skvq.cache.sliding import CacheStats
from skvq.calibration import smoothing_factors
from skvq.engine.attention import attend
from skvq.engine.generate import dense_cache, log_softmax, run_sequence
from skvq.engine.model import ModelConfig
from skvq.exceptions import ConfigError
from skvq.quant.codecs import GroupCodec, SmoothedCodec
from skvq.quant.spec import QuantSpec
from skvq.reorder import ReorderPlan, build_plan, collect_stats

logger = logging.getLogger('skvq.eval')
json_logger = logging.getLogger('skvq.json.eval')

CSV_FIELDS = ('strategy', 'bits_key', 'bits_value', 'group_size', 'window', 'sink', 'avg_bits', 'mse', 'ppl')

CellResult = namedtuple('CellResult', 'seed strategy mse ppl key_bits value_bits avg_bits')
ReportRow = namedtuple('ReportRow', CSV_FIELDS)


def _reference(model, sequences, prefill, decode_chunk):
    outputs = []
    for tokens in sequences:
        record = _Recorder(model.config.n_layers)
        run_sequence(model, tokens, dense_cache(model), prefill, decode_chunk, record)
        outputs.append(record.outputs())
    return outputs


class _Recorder(object):
    def __init__(self, n_layers):
        self.parts = [[] for _ in range(n_layers)]

    def __call__(self, index, h, out):
        self.parts[index].append(np.asarray(out, dtype=np.float64))

    def outputs(self):
        return [np.concatenate(parts) for parts in self.parts]


def _measured_bits(stats):
    if stats.quantized_tokens:
        return stats.quantized_bits
    return stats.bits_per_element


def run_cell(model, codecs, strategy, sequences, reference, prefill=1, decode_chunk=1, seed=None):
    """One strategy on one model: attention-output MSE, perplexity and measured bits."""
    error = 0.0
    count = 0
    nll = []
    totals = {}
    for tokens, expected in zip(sequences, reference):
        tokens = np.asarray(tokens, dtype=np.int64)
        cache = strategy.build_cache(codecs)
        record = _Recorder(model.config.n_layers)
        logits = run_sequence(model, tokens[:-1], cache, prefill, decode_chunk, record)
        for got, want in zip(record.outputs(), expected):
            error += float(((got - want) ** 2).sum())
            count += want.size
        nll.append(-log_softmax(logits)[np.arange(len(tokens) - 1), tokens[1:]])
        for name, stats in cache.stats().items():
            totals[name] = totals[name] + stats if name in totals else stats

    key_bits = _measured_bits(totals['key'])
    value_bits = _measured_bits(totals['value'])
    both = totals['key'] + totals['value']
    result = CellResult(seed, strategy.name, error / count, float(np.exp(np.concatenate(nll).mean())),
                        key_bits, value_bits, _measured_bits(both))
    json_logger.info(json.dumps({'event': 'eval_cell', 'seed': seed, 'strategy': strategy.name, 'mse': result.mse,
                                 'ppl': result.ppl, 'key_bits': key_bits, 'value_bits': value_bits},
                                separators=(',', ':')))
    return result


def compare_strategies(resources, sequences, strategies, prefill=1, decode_chunk=1, seed=None, workers=1,
                       progress=None):
    """Run every strategy against one model; returns one CellResult per strategy, in order.

    Strategies are prepared one after the other (calibration state is shared and
    cached), then the cells run in a thread pool.
    """
    if not strategies:
        raise ConfigError('no strategies to compare')
    sequences = [np.asarray(tokens, dtype=np.int64) for tokens in sequences]
    if not sequences or min(len(tokens) for tokens in sequences) < 2:
        raise ConfigError('evaluation sequences need at least two tokens each')
    reference = _reference(resources.model, [tokens[:-1] for tokens in sequences], prefill, decode_chunk)
    prepared = [strategy.prepare(resources) for strategy in strategies]

    def cell(item):
        strategy, (model, codecs) = item
        return run_cell(model, codecs, strategy, sequences, reference, prefill, decode_chunk, seed)

    results = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for result in executor.map(cell, zip(strategies, prepared)):
            logger.info('Seed %s, %s: attention MSE %.6g, perplexity %.4f, %.3f/%.3f bits',
                        seed, result.strategy, result.mse, result.ppl, result.key_bits, result.value_bits)
            results.append(result)
            if progress is not None:
                progress.did(1)
    return results


def summarize(strategies, results):
    """Average the per-seed cells of every strategy into report rows."""
    rows = []
    for strategy in strategies:
        cells = [result for result in results if result.strategy == strategy.name]
        if not cells:
            continue
        rows.append(ReportRow(strategy.name, strategy.key_spec.key, strategy.value_spec.key, strategy.group_size,
                              strategy.window, strategy.sinks,
                              float(np.mean([cell.avg_bits for cell in cells])),
                              float(np.mean([cell.mse for cell in cells])),
                              float(np.mean([cell.ppl for cell in cells]))))
    return rows


def write_csv(rows, f):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([row.strategy, row.bits_key, row.bits_value, row.group_size, row.window, row.sink,
                         '%.4f' % row.avg_bits, '%.6g' % row.mse, '%.4f' % row.ppl])


def format_text(rows):
    lines = [('strategy', 'K', 'V', 'group', 'window', 'sink', 'bits', 'mse', 'ppl')]
    for row in rows:
        lines.append((row.strategy, row.bits_key, row.bits_value, str(row.group_size), str(row.window),
                      str(row.sink), '%.3f' % row.avg_bits, '%.4g' % row.mse, '%.3f' % row.ppl))
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    return ''.join('  '.join(cell.ljust(width) if not i else cell.rjust(width)
                             for i, (cell, width) in enumerate(zip(line, widths))).rstrip() + '\n'
                   for line in lines)


SyntheticKv = namedtuple('SyntheticKv', 'queries keys values')


def synthetic_kv(seed, tokens=256, n_heads=4, n_kv_heads=2, head_dim=64, offset_scale=2.0, scale_sigma=1.0,
                 drift=0.25, outliers=2, outlier_scale=10.0):
    """Channel-heterogeneous attention inputs: per-channel offsets and log-normal scales, a few outlier
    channels per head, and a slowly drifting per-token magnitude."""
    rng = np.random.default_rng(seed)
    kv_hidden = n_kv_heads * head_dim

    def rows():
        offsets = rng.normal(0.0, offset_scale, size=kv_hidden)
        scales = rng.lognormal(0.0, scale_sigma, size=kv_hidden)
        for head in range(n_kv_heads):
            picks = rng.choice(head_dim, size=min(outliers, head_dim), replace=False)
            scales[head * head_dim + picks] *= outlier_scale
        magnitude = np.exp(np.cumsum(rng.normal(0.0, drift / np.sqrt(tokens), size=tokens)))
        return (offsets + scales * magnitude[:, None] * rng.standard_normal((tokens, kv_hidden))).astype(np.float32)

    queries = rng.standard_normal((tokens, n_heads * head_dim)).astype(np.float32)
    return SyntheticKv(queries, rows(), rows())


def _roundtrip(codec, rows, order=None):
    if order is None:
        return codec.decode(codec.encode(rows, np.arange(len(rows))))
    decoded = codec.decode(codec.encode(rows[:, order], np.arange(len(rows))))
    return decoded[:, np.argsort(order)]


def compare_on_synthetic(seed, spec, calibration_tokens=128, tokens=256, n_heads=4, n_kv_heads=2, head_dim=64,
                         **generator):
    """Attention-output MSE of RTN, smoothing and reorder on synthetic data; returns {name: mse}.

    The first `calibration_tokens` rows provide channel statistics; the
    rest are quantized and attended.
    """
    if not isinstance(spec, QuantSpec):
        raise ConfigError('expected a QuantSpec, got %r' % (spec,))
    data = synthetic_kv(seed, calibration_tokens + tokens, n_heads, n_kv_heads, head_dim, **generator)
    config = ModelConfig(n_layers=1, hidden=n_heads * head_dim, n_heads=n_heads, n_kv_heads=n_kv_heads)
    calib = slice(0, calibration_tokens)
    test = slice(calibration_tokens, None)
    key_stats, value_stats = collect_stats([(data.keys[calib], data.values[calib])])

    q, k, v = data.queries[test], data.keys[test], data.values[test]
    reference = attend(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64), 0, config)

    identity = ReorderPlan.identity(1, n_kv_heads, head_dim, spec.group_size).layers[0]
    plan = build_plan([(key_stats, value_stats)], n_kv_heads, head_dim, spec.group_size, seed).layers[0]
    smooth_key = SmoothedCodec(GroupCodec(spec, identity.key.boundaries), smoothing_factors(key_stats))
    smooth_value = SmoothedCodec(GroupCodec(spec, identity.value.boundaries), smoothing_factors(value_stats))
    variants = {
        'rtn': (_roundtrip(GroupCodec(spec, identity.key.boundaries), k),
                _roundtrip(GroupCodec(spec, identity.value.boundaries), v)),
        'smooth': (_roundtrip(smooth_key, k), _roundtrip(smooth_value, v)),
        'reorder': (_roundtrip(GroupCodec(spec, plan.key.boundaries), k, plan.key.permutation),
                    _roundtrip(GroupCodec(spec, plan.value.boundaries), v, plan.value.permutation)),
    }
    errors = {}
    for name, (keys, values) in variants.items():
        out = attend(q.astype(np.float64), keys.astype(np.float64), values.astype(np.float64), 0, config)
        errors[name] = float(((out - reference) ** 2).mean())
    logger.debug('Synthetic seed %d at %s: %s', seed, spec, errors)
    return errors


def cache_stats_row(stats):
    """Flat dict of one CacheStats for reports and logs."""
    if not isinstance(stats, CacheStats):
        raise ConfigError('expected cache statistics')
    data = stats._asdict()
    data.update(quantized_bits=stats.quantized_bits, bits_per_element=stats.bits_per_element)
    return data
