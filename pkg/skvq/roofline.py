"""Roofline estimates of KV-cache memory and decode-step latency.

A decode step reads every weight once and the whole KV cache once. It takes
max(FLOPs / peak compute, bytes / bandwidth) seconds. Sizes are in bytes and
sequence lengths are token counts; 1 GB here is 1e9 bytes.
"""
import csv
import io
from collections import namedtuple
from dataclasses import dataclass, replace

from skvq.exceptions import ConfigError

A100_PEAK_FLOPS = 312e12
A100_BANDWIDTH = 2.039e12
A100_CAPACITY = 80e9

GB = 1e9


@dataclass(frozen=True)
class RooflineConfig:
    # hardware
    peak_flops: float = A100_PEAK_FLOPS
    bandwidth: float = A100_BANDWIDTH
    capacity: float = A100_CAPACITY
    # model
    n_layers: int = 32
    hidden: int = 4096
    n_heads: int = 32
    n_kv_heads: int = 32
    head_dim: int = 128
    weight_count: float = 6.74e9
    weight_bits: float = 16
    # workload
    batch: int = 1
    seq: int = 1
    kv_bits: float = 16
    activation_bytes: float = 0.0

    def __post_init__(self):
        for name in ('peak_flops', 'bandwidth', 'capacity', 'n_layers', 'hidden', 'n_heads', 'n_kv_heads',
                     'head_dim', 'weight_count', 'weight_bits', 'batch', 'seq', 'kv_bits'):
            if not getattr(self, name) > 0:
                raise ConfigError('roofline %s must be positive, got %r' % (name, getattr(self, name)))
        if self.kv_bits > 16:
            raise ConfigError('KV cache bits must not exceed 16, got %r' % self.kv_bits)
        if self.activation_bytes < 0:
            raise ConfigError('activation bytes must be non-negative')

    @property
    def kv_hidden(self):
        return self.n_kv_heads * self.head_dim

    @property
    def heads_ratio(self):
        return self.n_heads / self.n_kv_heads

    @property
    def weight_bytes(self):
        return self.weight_count * self.weight_bits / 8

    def replace(self, **changes):
        return replace(self, **changes)


def llama_7b(**overrides):
    return RooflineConfig(**overrides)


def kv_bytes_per_token(cfg):
    return cfg.n_layers * 2 * cfg.kv_hidden * cfg.kv_bits / 8


def kv_bytes(cfg):
    return cfg.batch * cfg.seq * kv_bytes_per_token(cfg)


def memory_access(cfg):
    """Bytes moved by one decode step."""
    return cfg.weight_bytes + kv_bytes(cfg) + cfg.activation_bytes


def memory_consumption(cfg):
    """Bytes resident on the device."""
    return cfg.weight_bytes + kv_bytes(cfg) + cfg.activation_bytes


def decode_flops(cfg):
    attention = cfg.seq * cfg.n_layers * 2 * cfg.kv_hidden * cfg.heads_ratio
    return 2 * cfg.batch * (cfg.weight_count + attention)


def compute_time(cfg):
    return decode_flops(cfg) / cfg.peak_flops


def memory_time(cfg):
    return memory_access(cfg) / cfg.bandwidth


def decode_step_latency(cfg):
    return max(compute_time(cfg), memory_time(cfg))


def speedup(cfg_a, cfg_b):
    """How many times faster a decode step under `cfg_b` is than under `cfg_a`."""
    if (cfg_a.batch, cfg_a.seq) != (cfg_b.batch, cfg_b.seq):
        raise ConfigError('speedup compares configurations with the same batch and sequence length')
    return decode_step_latency(cfg_a) / decode_step_latency(cfg_b)


def max_context(cfg):
    """Longest sequence whose weights, activations and KV cache fit in device memory at this batch size."""
    free = cfg.capacity - cfg.weight_bytes - cfg.activation_bytes
    if free <= 0:
        return 0
    return int(free // (cfg.batch * kv_bytes_per_token(cfg)))


RooflineRow = namedtuple('RooflineRow', 'batch seq label kv_bits latency memory_access memory_consumption bound')

DEFAULT_BATCHES = (1, 64, 128)
DEFAULT_SEQS = (32000, 128000, 200000)
# label -> average KV bits: FP16, then 4 and 2 bit codes with FP16 parameters per 128 channels
DEFAULT_KV_BITS = (('FP16', 16.0), ('KV4', 4.25), ('KV2', 2.25))


def report_table(base, batches=DEFAULT_BATCHES, seqs=DEFAULT_SEQS, kv_bits=DEFAULT_KV_BITS):
    if not batches or not seqs or not kv_bits:
        raise ConfigError('roofline grid is empty')
    rows = []
    for batch in batches:
        for label, bits in kv_bits:
            for seq in seqs:
                cfg = base.replace(batch=batch, seq=seq, kv_bits=bits)
                bound = 'memory' if memory_time(cfg) >= compute_time(cfg) else 'compute'
                rows.append(RooflineRow(batch, seq, label, bits, decode_step_latency(cfg), memory_access(cfg),
                                        memory_consumption(cfg), bound))
    return rows


def format_seq(seq):
    return '%dk' % (seq // 1000) if seq % 1000 == 0 else str(seq)


CSV_FIELDS = ('batch', 'seq', 'kv', 'kv_bits', 'latency_s', 'memory_access_gb', 'memory_consumption_gb', 'bound')


def write_csv(rows, f):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([row.batch, row.seq, row.label, '%g' % row.kv_bits, '%.6g' % row.latency,
                         '%.6g' % (row.memory_access / GB), '%.6g' % (row.memory_consumption / GB), row.bound])


def format_text(rows):
    """Aligned table, one block per batch size, sequence lengths as columns."""
    seqs = sorted({row.seq for row in rows})
    out = io.StringIO()
    header = ['batch', 'kv', 'metric'] + [format_seq(seq) for seq in seqs]
    lines = [header]
    cells = {(row.batch, row.label, row.seq): row for row in rows}
    for batch in sorted({row.batch for row in rows}):
        labels = []
        for row in rows:
            if row.batch == batch and row.label not in labels:
                labels.append(row.label)
        for label in labels:
            for metric, value in (('time (s)', lambda r: '%.3g' % r.latency),
                                  ('access (GB)', lambda r: '%.4g' % (r.memory_access / GB)),
                                  ('memory (GB)', lambda r: '%.4g' % (r.memory_consumption / GB))):
                line = [str(batch), label, metric]
                for seq in seqs:
                    row = cells.get((batch, label, seq))
                    line.append(value(row) if row else '-')
                lines.append(line)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    for line in lines:
        out.write('  '.join(cell.rjust(width) for cell, width in zip(line, widths)).rstrip() + '\n')
    return out.getvalue()
