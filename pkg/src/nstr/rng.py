"""Named, seeded random streams.

Every stochastic step draws from a generator derived from the global seed
and a stream name, so adding a new consumer never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``(seed, name)``."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
