"""Channel reorder: cluster K/V channels with similar ranges so they share quantization groups.

Clustering runs independently inside every KV head, so a permutation never moves a
channel across heads. The permutation is fused into the projection weights; the
attention output is unchanged because the matching query (for K) and output
projection (for V) channels are permuted the same way.
"""
import logging
import zlib
from collections import namedtuple

import numpy as np

from skvq.exceptions import PlanError
from skvq.quant.codecs import check_boundaries

logger = logging.getLogger('skvq.reorder')

KMEANS_MAX_ITER = 100
KMEANS_TOLERANCE = 1e-6

CACHES = ('key', 'value')


class ChannelStats(namedtuple('ChannelStats', 'low high')):
    """Per-channel minimum and maximum over every calibration token."""
    __slots__ = ()

    @property
    def channels(self):
        return len(self.low)

    def features(self):
        return np.stack([self.low, self.high], axis=1)

    def merge(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.channels:
            raise PlanError('expected rows of %d channels, got shape %r' % (self.channels, rows.shape))
        if not len(rows):
            return self
        return ChannelStats(np.minimum(self.low, rows.min(axis=0)), np.maximum(self.high, rows.max(axis=0)))

    def slice(self, start, end):
        return ChannelStats(self.low[start:end], self.high[start:end])

    @classmethod
    def empty(cls, channels):
        return cls(np.full(channels, np.inf), np.full(channels, -np.inf))


def collect_stats(samples):
    """Fold (K rows, V rows) samples into a (key, value) pair of ChannelStats."""
    stats = None
    tokens = 0
    for keys, values in samples:
        keys = np.asarray(keys)
        values = np.asarray(values)
        if keys.ndim != 2 or values.ndim != 2:
            raise PlanError('samples must be 2-dimensional token rows')
        if stats is None:
            stats = [ChannelStats.empty(keys.shape[1]), ChannelStats.empty(values.shape[1])]
        stats = [stats[0].merge(keys), stats[1].merge(values)]
        tokens += len(keys)
    if not tokens:
        raise PlanError('cannot collect channel statistics from zero tokens')
    return tuple(stats)


def _kmeans_plus_plus(features, k, rng):
    n = len(features)
    centers = [int(rng.integers(n))]
    distance = ((features - features[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = distance.sum()
        if total > 0:
            choice = int(rng.choice(n, p=distance / total))
        else:
            choice = int(rng.integers(n))
        centers.append(choice)
        distance = np.minimum(distance, ((features - features[choice]) ** 2).sum(axis=1))
    return features[centers].copy()


def kmeans(features, k, seed, max_iter=KMEANS_MAX_ITER, tolerance=KMEANS_TOLERANCE):
    """Lloyd's algorithm with k-means++ seeding. Returns one cluster label per row of `features`."""
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(features, k, rng)

    for iteration in range(max_iter):
        distances = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = distances.argmin(axis=1)
        nearest = distances[np.arange(len(features)), labels]

        moved = centroids.copy()
        for cluster in range(k):
            members = labels == cluster
            if members.any():
                moved[cluster] = features[members].mean(axis=0)
            elif nearest.max() > 0:
                # Empty cluster: restart it on the point worst served by its centroid.
                farthest = int(nearest.argmax())
                moved[cluster] = features[farthest]
                labels[farthest] = cluster
                nearest[farthest] = 0

        shift = np.sqrt(((moved - centroids) ** 2).sum(axis=1)).max()
        centroids = moved
        if shift < tolerance:
            break

    distances = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    logger.debug('kmeans k=%d converged after %d iterations', k, iteration + 1)
    return distances.argmin(axis=1)


class PlanEntry(namedtuple('PlanEntry', 'permutation boundaries')):
    """Channel order for one layer's K or V cache.

    `permutation[i]` is the original channel stored at cache position i, and
    `boundaries` are the group offsets into that order.
    """
    __slots__ = ()

    def __new__(cls, permutation, boundaries):
        permutation = np.asarray(permutation, dtype=np.int64)
        if permutation.ndim != 1 or not np.array_equal(np.sort(permutation), np.arange(len(permutation))):
            raise PlanError('channel order is not a permutation')
        boundaries = check_boundaries(boundaries, len(permutation))
        return super().__new__(cls, permutation, boundaries)

    @property
    def channels(self):
        return len(self.permutation)

    @property
    def n_groups(self):
        return len(self.boundaries) - 1

    def inverse(self):
        inverse = np.empty_like(self.permutation)
        inverse[self.permutation] = np.arange(self.channels)
        return inverse

    def is_identity(self):
        return np.array_equal(self.permutation, np.arange(self.channels))

    def write(self, writer):
        writer.u32(self.channels)
        writer.array(self.permutation, '<u4')
        writer.u32(self.n_groups)
        writer.array(self.boundaries, '<u4')

    @classmethod
    def read(cls, reader):
        channels = reader.u32()
        permutation = reader.array('<u4', channels)
        n_groups = reader.u32()
        return cls(permutation, reader.array('<u4', n_groups + 1))


LayerPlan = namedtuple('LayerPlan', 'key value')


def groups_per_head(head_dim, group_size):
    return min(head_dim, max(1, int(round(head_dim / group_size))))


def cluster_channels(stats, n_groups, seed, max_iter=KMEANS_MAX_ITER, tolerance=KMEANS_TOLERANCE):
    channels = stats.channels
    if not 1 <= n_groups <= channels:
        raise PlanError('cannot split %d channels into %d groups' % (channels, n_groups))

    labels = kmeans(stats.features(), n_groups, seed, max_iter, tolerance)
    # Number clusters by their first channel so the order is independent of the seeding.
    order = {}
    for label in labels:
        order.setdefault(int(label), len(order))
    relabeled = np.array([order[int(label)] for label in labels])

    permutation = np.argsort(relabeled, kind='stable')
    counts = np.bincount(relabeled, minlength=len(order))
    return PlanEntry(permutation, np.concatenate([[0], np.cumsum(counts)]))


def _join_heads(entries, head_dim):
    permutation = np.concatenate([entry.permutation + head * head_dim for head, entry in enumerate(entries)])
    boundaries = [0]
    for head, entry in enumerate(entries):
        boundaries.extend(entry.boundaries[1:] + head * head_dim)
    return PlanEntry(permutation, boundaries)


class ReorderPlan(object):
    def __init__(self, layers, n_kv_heads, head_dim):
        self.layers = list(layers)
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        for entry in self.entries():
            if entry.channels != n_kv_heads * head_dim:
                raise PlanError('plan entry has %d channels, expected %d' % (entry.channels, n_kv_heads * head_dim))
            heads = entry.permutation // head_dim
            if np.any(heads != np.arange(entry.channels) // head_dim):
                raise PlanError('channel order moves channels across KV heads')
            if not np.all(np.isin(np.arange(1, n_kv_heads) * head_dim, entry.boundaries)):
                raise PlanError('a group straddles two KV heads')

    @property
    def n_layers(self):
        return len(self.layers)

    def entries(self):
        for layer in self.layers:
            yield layer.key
            yield layer.value

    @classmethod
    def identity(cls, n_layers, n_kv_heads, head_dim, group_size):
        per_head = groups_per_head(head_dim, group_size)
        head_bounds = np.linspace(0, head_dim, per_head + 1).round().astype(np.int64)
        entry = _join_heads([PlanEntry(np.arange(head_dim), head_bounds)] * n_kv_heads, head_dim)
        return cls([LayerPlan(entry, entry) for _ in range(n_layers)], n_kv_heads, head_dim)

    def is_identity(self):
        return all(entry.is_identity() for entry in self.entries())

    def check(self, config):
        if (self.n_layers, self.n_kv_heads, self.head_dim) != (config.n_layers, config.n_kv_heads, config.head_dim):
            raise PlanError('plan for %d layers x %d heads x %d channels does not fit model %d x %d x %d' %
                            (self.n_layers, self.n_kv_heads, self.head_dim,
                             config.n_layers, config.n_kv_heads, config.head_dim))

    def checksum(self):
        crc = zlib.crc32(np.array([self.n_layers, self.n_kv_heads, self.head_dim], dtype='<u4').tobytes())
        for entry in self.entries():
            crc = zlib.crc32(entry.permutation.astype('<u4').tobytes(), crc)
            crc = zlib.crc32(entry.boundaries.astype('<u4').tobytes(), crc)
        return crc

    def write(self, writer):
        writer.u32(self.n_layers)
        writer.u32(self.n_kv_heads)
        writer.u32(self.head_dim)
        for entry in self.entries():
            entry.write(writer)

    @classmethod
    def read(cls, reader):
        n_layers = reader.u32()
        n_kv_heads = reader.u32()
        head_dim = reader.u32()
        layers = [LayerPlan(PlanEntry.read(reader), PlanEntry.read(reader)) for _ in range(n_layers)]
        return cls(layers, n_kv_heads, head_dim)

    def __eq__(self, other):
        if not isinstance(other, ReorderPlan) or (self.n_layers, self.n_kv_heads, self.head_dim) != \
                (other.n_layers, other.n_kv_heads, other.head_dim):
            return False
        return all(np.array_equal(a.permutation, b.permutation) and np.array_equal(a.boundaries, b.boundaries)
                   for a, b in zip(self.entries(), other.entries()))

    def __ne__(self, other):
        return not self == other


def build_plan(layer_stats, n_kv_heads, head_dim, group_size, seed,
               max_iter=KMEANS_MAX_ITER, tolerance=KMEANS_TOLERANCE):
    """Cluster every KV head of every layer. `layer_stats` holds one (key, value) ChannelStats pair per layer."""
    per_head = groups_per_head(head_dim, group_size)
    layers = []
    for index, pair in enumerate(layer_stats):
        entries = []
        for cache, stats in enumerate(pair):
            heads = [cluster_channels(stats.slice(head * head_dim, (head + 1) * head_dim), per_head,
                                      [seed, index, cache, head], max_iter, tolerance)
                     for head in range(n_kv_heads)]
            entries.append(_join_heads(heads, head_dim))
        layers.append(LayerPlan(*entries))
        logger.info('Layer %d: %d key groups, %d value groups', index, entries[0].n_groups, entries[1].n_groups)
    return ReorderPlan(layers, n_kv_heads, head_dim)


def query_permutation(entry, n_heads, n_kv_heads, head_dim):
    """Expand a KV-channel order to the query (or attention output) channels of every query head."""
    rep = n_heads // n_kv_heads
    parts = []
    for head in range(n_heads):
        group = head // rep
        local = entry.permutation[group * head_dim:(group + 1) * head_dim] - group * head_dim
        parts.append(local + head * head_dim)
    return np.concatenate(parts)


def fuse_into_weights(layer_plan, w_q, w_k, w_v, w_o, n_heads, n_kv_heads, head_dim):
    """Permute projection weights so K and V come out in cache order.

    Weights act on row vectors: K = X @ w_k, so output channels are columns.
    """
    kv_hidden = n_kv_heads * head_dim
    if w_k.shape[1] != kv_hidden or w_v.shape[1] != kv_hidden or layer_plan.key.channels != kv_hidden:
        raise PlanError('plan has %d channels, projections have %d and %d' %
                        (layer_plan.key.channels, w_k.shape[1], w_v.shape[1]))
    if w_q.shape[1] != n_heads * head_dim or w_o.shape[0] != n_heads * head_dim:
        raise PlanError('query or output projection does not match %d heads of %d channels' % (n_heads, head_dim))

    w_q = w_q[:, query_permutation(layer_plan.key, n_heads, n_kv_heads, head_dim)]
    w_k = w_k[:, layer_plan.key.permutation]
    w_v = w_v[:, layer_plan.value.permutation]
    w_o = w_o[query_permutation(layer_plan.value, n_heads, n_kv_heads, head_dim), :]
    return w_q, w_k, w_v, w_o


def plan_spread(entry, stats):
    """Sum over groups of (largest max - smallest min), measured in cache order."""
    low = stats.low[entry.permutation]
    high = stats.high[entry.permutation]
    return float(sum(high[start:end].max() - low[start:end].min()
                     for start, end in zip(entry.boundaries[:-1], entry.boundaries[1:])))
