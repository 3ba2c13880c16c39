"""Deterministic random streams.

Every stream is keyed by ``(master seed, label, chunk index)`` so results do
not depend on how work is split across threads.
"""

import zlib

import numpy as np

CHUNK = 1024


def _key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(master, *labels):
    return np.random.SeedSequence(int(master), spawn_key=tuple(_key(x) for x in labels))


def generator(master, *labels):
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *labels)))


def derive_seed(master, *labels):
    """A 63-bit integer seed derived from ``master`` and ``labels``."""
    return int(seed_sequence(master, *labels).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def chunked(master, label, n_paths, draw):
    """Concatenate ``draw(rng, size)`` over fixed-size path chunks.

    Path ``i`` always lands in chunk ``i // CHUNK`` with the same stream,
    so a longer run extends a shorter one instead of reshuffling it.
    """
    parts = []
    for c, start in enumerate(range(0, n_paths, CHUNK)):
        size = min(CHUNK, n_paths - start)
        parts.append(draw(generator(master, label, c), size))
    return parts
