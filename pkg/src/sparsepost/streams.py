"""Named, reproducible random streams derived from a single master seed.

Every source of randomness in the package draws from a generator created
here, so that one 64-bit seed pins an entire experiment. Streams are
identified by a path of names and integers (e.g. ``("data-shuffle", epoch)``)
hashed into a ``SeedSequence`` spawn key; different paths give statistically
independent streams.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _path_key(path: tuple) -> tuple[int, ...]:
    key = []
    for part in path:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        elif isinstance(part, (int, np.integer)):
            key.append(int(part) & _MASK64)
        else:
            raise TypeError(f"stream path parts must be str or int, got {type(part)!r}")
    return tuple(key)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Return a fresh generator for the stream named by ``path``."""
    seq = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_path_key(path))
    return np.random.default_rng(seq)


def derive_seed(seed: int, *path) -> int:
    """Collapse a named stream to a single 64-bit integer sub-seed."""
    seq = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_path_key(path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def chain_seed(master_seed: int, chain_index: int) -> int:
    """Per-chain seed: master seed XOR the chain index."""
    return (int(master_seed) ^ int(chain_index)) & _MASK64
