import logging

import numpy as np

from skvq.cache.sliding import DenseKvCache
from skvq.engine.attention import attention_block, mlp, rms_norm
from skvq.exceptions import ModelError
from skvq.utils.iterator import chunk

logger = logging.getLogger('skvq.engine')


def dense_cache(model):
    return DenseKvCache(model.config.n_layers, model.config.kv_hidden)


def forward(model, tokens, cache, record=None):
    """Run `tokens` through the model on top of what `cache` already holds; returns their logits.

    `record(layer, h, attention_output)` sees every layer's normalized input and
    attention output.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or not len(tokens):
        raise ModelError('forward needs a non-empty token vector')
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise ModelError('token id out of range for vocabulary of %d' % model.config.vocab)

    positions = np.arange(cache.total, cache.total + len(tokens))
    x = model.embed[tokens]
    for index, (layer, cache_layer) in enumerate(zip(model.layers, cache.layers)):
        h = rms_norm(x)
        out = attention_block(layer, h, positions, cache_layer, cache.filters, model.config)
        if record is not None:
            record(index, h, out)
        x = x + out
        x = x + mlp(layer, rms_norm(x))
    return rms_norm(x) @ model.w_out


def trace_layers(model, sequences):
    """Normalized attention inputs of every layer for each sequence, from a full-precision prefill."""
    traces = [[] for _ in range(model.config.n_layers)]
    for tokens in sequences:
        forward(model, tokens, dense_cache(model), record=lambda index, h, out: traces[index].append(h))
    return traces


def generate(model, prompt, n_new, cache=None):
    """Greedy decoding: one prefill pass over the prompt, then one token per step."""
    prompt = [int(token) for token in prompt]
    if not prompt:
        raise ModelError('cannot generate from an empty prompt')
    cache = dense_cache(model) if cache is None else cache

    tokens = list(prompt)
    if n_new <= 0:
        return tokens
    logits = forward(model, prompt, cache)
    for step in range(n_new):
        tokens.append(int(np.argmax(logits[-1])))
        if step + 1 < n_new:
            logits = forward(model, tokens[-1:], cache)
    logger.debug('Generated %d tokens after a %d token prompt', n_new, len(prompt))
    return tokens


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def run_sequence(model, tokens, cache, prefill=1, decode_chunk=1, record=None):
    """Teacher-forced pass: prefill `prefill` tokens, then feed the rest `decode_chunk` at a time.

    Returns the logits for every position.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    prefill = max(1, min(prefill, len(tokens)))
    logits = [forward(model, tokens[:prefill], cache, record)]
    for part in chunk(tokens[prefill:], max(1, decode_chunk)):
        logits.append(forward(model, part, cache, record))
    return np.concatenate(logits)


def perplexity(model, tokens, cache=None, prefill=1, decode_chunk=1):
    """exp(mean next-token negative log-likelihood) under teacher forcing."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ModelError('perplexity needs at least two tokens')
    cache = dense_cache(model) if cache is None else cache
    logits = run_sequence(model, tokens[:-1], cache, prefill, decode_chunk)
    nll = -log_softmax(logits)[np.arange(len(tokens) - 1), tokens[1:]]
    return float(np.exp(nll.mean()))
