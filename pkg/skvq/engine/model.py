import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from skvq.exceptions import ModelError
from skvq.reorder import fuse_into_weights, query_permutation


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden: int = 256
    n_heads: int = 4
    n_kv_heads: int = 2
    vocab: int = 256
    mlp_hidden: int = 512
    rope: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ('n_layers', 'hidden', 'n_heads', 'n_kv_heads', 'vocab', 'mlp_hidden'):
            if int(getattr(self, name)) < 1:
                raise ModelError('%s must be positive' % name)
        if self.hidden % self.n_heads:
            raise ModelError('hidden size %d is not divisible by %d heads' % (self.hidden, self.n_heads))
        if self.n_heads % self.n_kv_heads:
            raise ModelError('%d query heads cannot share %d KV heads' % (self.n_heads, self.n_kv_heads))
        if self.rope and self.head_dim % 2:
            raise ModelError('rotary embeddings need an even head size, got %d' % self.head_dim)

    @property
    def head_dim(self):
        return self.hidden // self.n_heads

    @property
    def kv_hidden(self):
        return self.n_kv_heads * self.head_dim

    @property
    def group_ratio(self):
        return self.n_heads // self.n_kv_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelError('unknown model settings: %s' % ', '.join(sorted(unknown)))
        return cls(**data)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    # With rotary embeddings the K order is applied after rotation instead of inside w_q/w_k.
    q_order: Optional[np.ndarray] = field(default=None)
    k_order: Optional[np.ndarray] = field(default=None)

    TENSORS = ('w_q', 'w_k', 'w_v', 'w_o', 'w_up', 'w_down')

    def check(self, config):
        d, kv, m = config.hidden, config.kv_hidden, config.mlp_hidden
        shapes = {'w_q': (d, d), 'w_k': (d, kv), 'w_v': (d, kv), 'w_o': (d, d), 'w_up': (d, m), 'w_down': (m, d)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ModelError('%s has shape %r, expected %r' % (name, getattr(self, name).shape, shape))


class Model(object):
    """A small decoder-only transformer: embeddings, pre-norm attention and MLP blocks, output head."""

    def __init__(self, config, embed, layers, w_out):
        self.config = config
        self.embed = np.asarray(embed, dtype=np.float32)
        self.layers = list(layers)
        self.w_out = np.asarray(w_out, dtype=np.float32)
        if len(self.layers) != config.n_layers:
            raise ModelError('%d layer weight sets for a %d-layer model' % (len(self.layers), config.n_layers))
        if self.embed.shape != (config.vocab, config.hidden):
            raise ModelError('embedding has shape %r' % (self.embed.shape,))
        if self.w_out.shape != (config.hidden, config.vocab):
            raise ModelError('output head has shape %r' % (self.w_out.shape,))
        for layer in self.layers:
            layer.check(config)

    @classmethod
    def random(cls, config, seed, outlier_channels=2, outlier_scale=8.0):
        """Seeded toy weights with heavy-tailed K/V channel scales.

        Every KV head gets log-normal per-channel scales on its K and V projection
        columns, plus `outlier_channels` channels blown up by `outlier_scale`.
        """
        rng = np.random.default_rng(seed)
        d, kv, m = config.hidden, config.kv_hidden, config.mlp_hidden

        def normal(*shape):
            return (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(np.float32)

        def channel_scales():
            scales = rng.lognormal(0.0, 0.5, size=kv)
            for head in range(config.n_kv_heads):
                picks = rng.choice(config.head_dim, size=min(outlier_channels, config.head_dim), replace=False)
                scales[head * config.head_dim + picks] *= outlier_scale
            return scales.astype(np.float32)

        layers = []
        for _ in range(config.n_layers):
            layers.append(LayerWeights(
                w_q=normal(d, d),
                w_k=normal(d, kv) * channel_scales(),
                w_v=normal(d, kv) * channel_scales(),
                w_o=normal(d, d),
                w_up=normal(d, m),
                w_down=normal(m, d),
            ))
        embed = rng.standard_normal((config.vocab, d)).astype(np.float32)
        return cls(config, embed, layers, normal(d, config.vocab))

    def fused(self, plan):
        """A copy with the plan's channel orders fused into the attention projections."""
        plan.check(self.config)
        config = self.config
        layers = []
        for weights, layer_plan in zip(self.layers, plan.layers):
            w_q, w_k, w_v, w_o = fuse_into_weights(layer_plan, weights.w_q, weights.w_k, weights.w_v, weights.w_o,
                                                   config.n_heads, config.n_kv_heads, config.head_dim)
            q_order = k_order = None
            if config.rope:
                # Rotation pairs channels by position, so Q/K are gathered after it instead.
                w_q, w_k = weights.w_q, weights.w_k
                q_order = query_permutation(layer_plan.key, config.n_heads, config.n_kv_heads, config.head_dim)
                k_order = layer_plan.key.permutation
            layers.append(LayerWeights(w_q, w_k, w_v, w_o, weights.w_up, weights.w_down, q_order, k_order))
        return Model(config, self.embed, layers, self.w_out)

    def tensors(self):
        yield 'embed', self.embed
        for index, layer in enumerate(self.layers):
            for name in LayerWeights.TENSORS:
                yield 'layers.%d.%s' % (index, name), getattr(layer, name)
        yield 'w_out', self.w_out

    def checksum(self):
        """SHA-256 over the configuration and every tensor, as raw little-endian float32."""
        digest = hashlib.sha256()
        for key, value in sorted(self.config.to_dict().items()):
            digest.update(('%s=%r;' % (key, value)).encode('utf-8'))
        for name, tensor in self.tensors():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(tensor, dtype='<f4').tobytes())
        return digest.digest()

    def __repr__(self):
        return '<Model %d layers, hidden %d, %d/%d heads>' % (
            self.config.n_layers, self.config.hidden, self.config.n_heads, self.config.n_kv_heads)
