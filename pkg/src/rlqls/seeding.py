"""Named, reproducible random streams.

Every stochastic component draws from its own stream derived from a master
seed plus a list of keys (strings or integers), so individual pieces of a
run can be replayed in isolation. String keys are hashed with CRC32, which
is stable across processes and platforms (unlike built-in ``hash``).
"""

import zlib

import numpy as np


def _encode_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the stream named by ``keys`` under ``master_seed``."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF] + [_encode_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
