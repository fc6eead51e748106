import math

import numpy as np

from skvq.exceptions import ModelError

RMS_EPSILON = 1e-6


def rms_norm(x):
    x = np.asarray(x)
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPSILON)


def softmax(scores, axis=-1):
    shifted = scores - scores.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=axis, keepdims=True)


def apply_rope(x, positions, head_dim, base):
    """Rotate channel pairs (i, i + head_dim/2) of every head by position-dependent angles."""
    half = head_dim // 2
    heads = x.reshape(len(x), -1, head_dim)
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    first, second = heads[..., :half], heads[..., half:]
    rotated = np.concatenate([first * cos - second * sin, second * cos + first * sin], axis=-1)
    return rotated.reshape(x.shape).astype(x.dtype)


def project_qkv(layer, h, positions, config):
    """Q, K and V rows for normalized inputs `h`, with K and V in cache channel order."""
    q = h @ layer.w_q
    k = h @ layer.w_k
    v = h @ layer.w_v
    if config.rope:
        q = apply_rope(q, positions, config.head_dim, config.rope_base)
        k = apply_rope(k, positions, config.head_dim, config.rope_base)
        if layer.q_order is not None:
            q = q[:, layer.q_order]
            k = k[:, layer.k_order]
    return q, k, v


def attend(q, keys, values, offset, config):
    """Causal grouped-query attention of `q` (rows at positions offset..) over the full key/value history.

    Query head h reads KV head h // (n_heads / n_kv_heads). Returns the
    concatenated head outputs, before the output projection.
    """
    head_dim = config.head_dim
    n_queries, n_keys = len(q), len(keys)
    if keys.shape != (n_keys, config.kv_hidden) or values.shape != keys.shape:
        raise ModelError('key/value rows have shapes %r and %r, expected (*, %d)' %
                         (keys.shape, values.shape, config.kv_hidden))
    if q.shape != (n_queries, config.hidden) or offset + n_queries > n_keys:
        raise ModelError('query rows of shape %r at offset %d do not fit %d keys' % (q.shape, offset, n_keys))

    q = q.reshape(n_queries, config.n_kv_heads, config.group_ratio, head_dim)
    keys = keys.reshape(n_keys, config.n_kv_heads, head_dim)
    values = values.reshape(n_keys, config.n_kv_heads, head_dim)

    scores = q.transpose(1, 2, 0, 3) @ keys.transpose(1, 2, 0)[:, None] / math.sqrt(head_dim)
    visible = np.arange(n_keys)[None, :] <= (offset + np.arange(n_queries))[:, None]
    scores = np.where(visible, scores, -np.inf)
    weights = softmax(scores)
    out = (weights @ values.transpose(1, 0, 2)[:, None]).transpose(2, 0, 1, 3)
    return out.reshape(n_queries, config.hidden).astype(q.dtype)


def attention_block(layer, h, positions, cache_layer, filters, config):
    """Attention for normalized inputs `h` against one layer of a KV cache.

    New rows are appended first and attended at full precision, and only then
    does the cache quantize whatever has slid out of its window.
    """
    q, k, v = project_qkv(layer, h, positions, config)
    cache_layer.append(k, v)
    keys, values = cache_layer.materialize()
    out = attend(q, keys, values, cache_layer.total - len(h), config) @ layer.w_o
    cache_layer.advance(filters)
    return out


def mlp(layer, h):
    up = h @ layer.w_up
    return np.maximum(up, 0) @ layer.w_down
