"""Seeded, counter-based random streams.

Streams are keyed by the run seed plus any number of labels, so that e.g. the
initialization of one task head never depends on how many other heads exist.
"""

import zlib

import numpy as np

Rng = np.random.Generator


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed: int, *labels) -> Rng:
    """Return a Philox generator for ``seed`` and the given stream labels."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *(_key(lab) for lab in labels)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
