"""Named random streams derived from a single root seed.

Every source of randomness (dataset generation, target-spec drawing,
training) pulls from its own stream so each protocol can be reproduced
independently of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Reproducible generator for the stream `name` under root `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _label_entropy(name)]))


def named_seed(seed: int, name: str) -> int:
    """63-bit integer seed for libraries that take a plain seed (e.g. torch)."""
    return int(named_rng(seed, name).integers(0, 2**63 - 1))
