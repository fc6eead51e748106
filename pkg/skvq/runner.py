"""What the management commands and celery tasks actually run, one function per subcommand."""
import logging
from collections import namedtuple

import numpy as np
from django.conf import settings

from skvq.artifacts import Artifact
from skvq.cache.filters import sink_filters
from skvq.cache.sliding import SlidingKvCache
from skvq.calibration import SEARCH_METHOD, CalibrationContext, CalibrationSet, check_grid
from skvq.engine.generate import generate
from skvq.engine.model import Model, ModelConfig
from skvq.engine.modelfile import read_model, write_model
from skvq.evaluation import compare_strategies, summarize
from skvq.exceptions import ConfigError
from skvq.quant.codecs import make_codec
from skvq.quant.spec import FULL_PRECISION_BITS, QuantSpec, average_bits
from skvq.reorder import ReorderPlan
from skvq.roofline import RooflineConfig, max_context, report_table
from skvq.strategies import CalibrationResources, ablation_strategies, strategy_by_name

logger = logging.getLogger('skvq')

GenerateResult = namedtuple('GenerateResult', 'tokens stats retained declared_bits')
EvalReport = namedtuple('EvalReport', 'rows cells')
RooflineReport = namedtuple('RooflineReport', 'rows capacity')


def toy_config(**overrides):
    return ModelConfig.from_dict(dict(settings.SKVQ_TOY_MODEL, **overrides))


def run_makemodel(cfg, **overrides):
    path = cfg.model or cfg.output
    if not path:
        raise ConfigError('makemodel needs a model or output path')
    model = Model.random(toy_config(**overrides), cfg.seed)
    write_model(model, path)
    return model


def load_model(cfg):
    if not cfg.model:
        raise ConfigError('no model file given; write one with makemodel')
    return read_model(cfg.model)


def calibration_set(cfg, vocab, seed=None):
    if cfg.dataset:
        calib = CalibrationSet.from_file(cfg.dataset)
    else:
        calib = CalibrationSet.random(cfg.calib_sequences, cfg.calib_length, vocab, cfg.seed if seed is None else seed)
    calib.require(cfg.window, vocab)
    return calib


def calibration_context(cfg, model, calib, seed=None):
    return CalibrationContext(model, calib, cfg.key_spec, cfg.value_spec, cfg.group_size,
                              cfg.seed if seed is None else seed, cfg.kmeans_max_iter, cfg.kmeans_tolerance)


def run_calibrate(cfg, progress=None):
    """Build the reorder plan, search clipping scales and write the artifact; returns it."""
    if not cfg.artifact:
        raise ConfigError('calibrate needs an artifact path')
    model = load_model(cfg)
    calib = calibration_set(cfg, model.config.vocab)
    context = calibration_context(cfg, model, calib)

    if progress is not None:
        progress.total = model.config.n_layers
        progress.stage = 'reorder'
    plan = context.plan(cfg.reorder)
    if progress is not None:
        progress.stage = 'clipping'
    schedule = context.calibrate(plan, cfg.alpha_grid, cfg.workers, progress)

    metadata = {
        'search': SEARCH_METHOD,
        'grid': check_grid(cfg.alpha_grid),
        'seed': cfg.seed,
        'reorder': cfg.reorder,
        'kmeans': {'max_iter': cfg.kmeans_max_iter, 'tolerance': cfg.kmeans_tolerance},
        'calibration': list(calib.shape),
        'losses': [[before, after] for before, after in schedule.losses],
    }
    artifact = Artifact(model.checksum(), cfg.key_spec, cfg.value_spec, plan, schedule, context.smoothing(), metadata)
    artifact.write(cfg.artifact)
    return artifact


def inference_codecs(cfg, model):
    """The model to decode with and its per-layer codecs, from the artifact if there is one."""
    if cfg.artifact:
        artifact = Artifact.read(cfg.artifact)
        artifact.check(model)
        if (artifact.key_spec, artifact.value_spec) != (cfg.key_spec, cfg.value_spec):
            logger.warning('Using the artifact quantization %s / %s instead of the configured %s / %s',
                           artifact.key_spec, artifact.value_spec, cfg.key_spec, cfg.value_spec)
        return model.fused(artifact.plan), artifact.codecs(), (artifact.key_spec, artifact.value_spec)

    config = model.config
    plan = ReorderPlan.identity(config.n_layers, config.n_kv_heads, config.head_dim, cfg.group_size)
    codecs = [(make_codec(cfg.key_spec, layer.key.boundaries), make_codec(cfg.value_spec, layer.value.boundaries))
              for layer in plan.layers]
    return model, codecs, (cfg.key_spec, cfg.value_spec)


def run_generate(cfg):
    model = load_model(cfg)
    model, codecs, specs = inference_codecs(cfg, model)
    cache = SlidingKvCache(codecs, cfg.window, sink_filters(cfg.sinks))
    tokens = generate(model, cfg.prompt, cfg.n_new, cache)
    if cfg.snapshot:
        cache.snapshot(cfg.snapshot)
    return GenerateResult(tokens, cache.stats(), cache.retained_tokens(),
                          tuple(average_bits(spec) for spec in specs))


def eval_strategies(cfg):
    defaults = dict(key_bits=cfg.key_bits, value_bits=cfg.value_bits, group_size=cfg.group_size,
                    window=cfg.window, sinks=cfg.sinks)
    if not cfg.strategies:
        return ablation_strategies(**defaults)
    return [strategy_by_name(name, **defaults) for name in cfg.strategies]


def run_eval(cfg, progress=None):
    """Every strategy on every evaluation seed. A model file, when given, is shared by all seeds."""
    strategies = eval_strategies(cfg)
    if progress is not None:
        progress.total = len(strategies) * len(cfg.eval_seeds)
    artifact = Artifact.read(cfg.artifact) if cfg.artifact else None
    cells = []
    for seed in cfg.eval_seeds:
        model = read_model(cfg.model) if cfg.model else Model.random(toy_config(), seed)
        if artifact is not None:
            artifact.check(model)
        if progress is not None:
            progress.stage = 'seed %d' % seed
        calib = calibration_set(cfg, model.config.vocab, seed)
        resources = CalibrationResources(calibration_context(cfg, model, calib, seed), cfg.alpha_grid, cfg.workers,
                                         artifact)
        rng = np.random.default_rng([seed, 1])
        sequences = [rng.integers(0, model.config.vocab, size=cfg.eval_length) for _ in range(cfg.eval_sequences)]
        cells.extend(compare_strategies(resources, sequences, strategies, cfg.prefill, cfg.decode_chunk, seed,
                                        cfg.workers, progress))
    return EvalReport(summarize(strategies, cells), cells)


def roofline_base(cfg):
    return RooflineConfig(peak_flops=cfg.peak_flops, bandwidth=cfg.bandwidth, capacity=cfg.capacity)


def kv_bit_columns(cfg):
    """FP16, KV4 and KV2 at group size 128, plus the configured key/value setting."""
    columns = [('FP16', float(FULL_PRECISION_BITS))]
    for bits in (4, 2):
        columns.append(('KV%d' % bits, average_bits(QuantSpec(bits, 128))))
    configured = (average_bits(cfg.key_spec) + average_bits(cfg.value_spec)) / 2
    if all(abs(configured - bits) > 1e-9 for label, bits in columns):
        columns.append(('K%s/V%s' % (cfg.key_spec.key, cfg.value_spec.key), configured))
    return tuple(columns)


def run_roofline(cfg):
    base = roofline_base(cfg)
    columns = kv_bit_columns(cfg)
    rows = report_table(base, cfg.batches, cfg.seqs, columns)
    capacity = [(batch, label, max_context(base.replace(batch=batch, kv_bits=bits)))
                for batch in cfg.batches for label, bits in columns]
    return RooflineReport(rows, capacity)
