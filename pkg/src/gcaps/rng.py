"""Deterministic random streams derived from one root seed.

Every source of randomness in the package (init, shuffling, attacks,
feature-generation restarts) pulls from a named substream so that
subcommands are independently reproducible from the same root seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    # Stable across platforms and processes, unlike hash().
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the substream identified by (seed, *path).

    Path components may be strings (stream names) or integers
    (e.g. example or restart indices).
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in path:
        keys.append(_name_key(part) if isinstance(part, str) else int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
