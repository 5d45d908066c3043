"""Deterministic seed fan-out.

Every random stream in the package is derived from a master seed through a
counter-based mixing scheme: the entropy fed to ``numpy.random.SeedSequence``
is ``[master, crc32(purpose), *keys]``, where ``purpose`` is a short label
("init", "batch", "participation", ...) and ``keys`` are small integers such
as client id or round number.  Streams keyed by different (purpose, keys)
tuples are independent, so e.g. adding clients never perturbs the streams of
existing ones.
"""

import zlib

import numpy as np

_U64 = (1 << 64) - 1


def derive_seed_sequence(master: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(master) & _U64, zlib.crc32(purpose.encode("utf-8"))]
    entropy.extend(int(k) & _U64 for k in keys)
    return np.random.SeedSequence(entropy)


def derive_rng(master: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for (master, purpose, keys)."""
    return np.random.default_rng(derive_seed_sequence(master, purpose, *keys))


def derive_seed(master: int, purpose: str, *keys: int) -> int:
    """Collapse a derived stream to a single u64, for APIs that take a seed."""
    return int(derive_seed_sequence(master, purpose, *keys).generate_state(1, np.uint64)[0])
