"""
Deterministic random streams.

All randomness flows from one integer seed. Each consumer asks for a named
stream (plus optional counters such as the training step) and receives an
independent Philox generator, so adding a consumer never shifts the draws of
another one.
"""
import zlib

import numpy as np

STREAMS = {
    "init": 0,
    "data": 1,
    "batch": 2,
    "dropout": 3,
    "bench": 4,
    "check": 5,
}


def stream_key(name: str) -> int:
    """Map a stream name onto its spawn key."""
    if name in STREAMS:
        return STREAMS[name]
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str = "init", *counters: int) -> np.random.Generator:
    """
    Create a counter-based generator for one named stream.

    Args:
        seed: Root seed of the run
        stream: Stream name (init, data, batch, dropout, ...)
        *counters: Extra integers folded into the key, e.g. a step number

    Returns:
        numpy Generator backed by Philox
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=(stream_key(stream), *[int(c) for c in counters]))
    return np.random.Generator(np.random.Philox(sequence))
