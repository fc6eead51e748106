def chunk(sequence, size):
    """Consecutive slices of at most `size` items; the last one may be shorter."""
    for start in range(0, len(sequence), size):
        yield sequence[start:start + size]
