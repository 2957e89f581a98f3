"""Counter-based random streams.

Every stream is a Philox generator whose key is derived from a base seed and
an integer path such as ``(sample_index, tap_index)``. Streams for different
paths are independent, so samples can be generated in any order or in
parallel with identical results.
"""
import numpy as np

# path tags for the top-level consumers
SCENARIO = 0
TAP = 1
SPLIT = 2
INIT = 3
EPOCH = 4
PREDICT = 5
SWEEP = 6


def stream(base_seed, *path):
    """Return a ``numpy.random.Generator`` keyed by ``(base_seed, *path)``."""
    if base_seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(base_seed, *path) -> int:
    """A 63-bit seed for a separate purpose, e.g. test sets that must not share streams with training data."""
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(p) for p in path))
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))
