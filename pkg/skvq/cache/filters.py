import numpy as np

from skvq.exceptions import CacheError


class FilterRule(object):
    """Decides which tokens leaving the sliding window stay at full precision.

    `retain` receives the token indices about to be quantized, their K and V
    rows and the current context length, and returns one boolean per token. A
    token is kept if any rule of the cache retains it.

    Rules must be pure: the same arguments always give the same decision. A
    heavy-hitter rule (keep tokens with large accumulated attention) fits this
    interface but is not provided.
    """
    name = None

    def retain(self, tokens, keys, values, context_length):
        raise NotImplementedError()

    def describe(self):
        return {'rule': self.name}


class AttentionSinkRule(FilterRule):
    """Keeps the first `n_sink` tokens of the sequence."""
    name = 'sink'

    def __init__(self, n_sink):
        if n_sink < 0:
            raise CacheError('sink count must be non-negative, got %d' % n_sink)
        self.n_sink = int(n_sink)

    def retain(self, tokens, keys, values, context_length):
        return np.asarray(tokens) < self.n_sink

    def describe(self):
        return {'rule': self.name, 'n_sink': self.n_sink}

    def __eq__(self, other):
        return isinstance(other, AttentionSinkRule) and other.n_sink == self.n_sink

    def __hash__(self):
        return hash((self.name, self.n_sink))

    def __repr__(self):
        return '<AttentionSinkRule %d>' % self.n_sink


def retained_mask(filters, tokens, keys, values, context_length):
    keep = np.zeros(len(tokens), dtype=bool)
    for rule in filters:
        keep |= np.asarray(rule.retain(tokens, keys, values, context_length), dtype=bool)
    return keep


def sink_filters(n_sink):
    return [AttentionSinkRule(n_sink)] if n_sink else []
