"""Token-level input perturbations for the student: shuffle, delete, mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import MASK


@dataclass(frozen=True)
class NoiseConfig:
    p_shuffle: float = 0.1
    p_delete: float = 0.1
    p_mask: float = 0.1
    min_len: int = 1
    stream: str = "noise"

    def __post_init__(self):
        for name in ("p_shuffle", "p_delete", "p_mask"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.min_len < 1:
            raise ValueError("min_len must be >= 1")

    @property
    def is_identity(self) -> bool:
        return self.p_shuffle == 0 and self.p_delete == 0 and self.p_mask == 0


NO_NOISE = NoiseConfig(0.0, 0.0, 0.0)


def _fisher_yates(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    values = values.copy()
    for i in range(len(values) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        values[i], values[j] = values[j], values[i]
    return values


def shuffle_tokens(tokens, p: float, rng: np.random.Generator) -> np.ndarray:
    """Select each position with probability ``p`` and permute the selected values."""
    tokens = np.asarray(tokens)
    picked = np.flatnonzero(rng.random(len(tokens)) < p)
    out = tokens.copy()
    if len(picked) > 1:
        out[picked] = _fisher_yates(tokens[picked], rng)
    return out


def delete_tokens(tokens, p: float, min_len: int, rng: np.random.Generator) -> np.ndarray:
    """Drop each token with probability ``p``; if fewer than ``min_len``
    survive, fall back to the first ``min_len`` original tokens."""
    tokens = np.asarray(tokens)
    kept = tokens[rng.random(len(tokens)) >= p]
    if len(kept) < min_len:
        return tokens[:min_len].copy()
    return kept


def mask_tokens(tokens, p: float, rng: np.random.Generator) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = tokens.copy()
    out[rng.random(len(tokens)) < p] = MASK
    return out


def apply_noise(tokens, config: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    out = shuffle_tokens(tokens, config.p_shuffle, rng)
    out = delete_tokens(out, config.p_delete, config.min_len, rng)
    return mask_tokens(out, config.p_mask, rng)


def shuffle_proportion(tokens, proportion: float, rng: np.random.Generator) -> np.ndarray:
    """Permute the values at ``ceil(proportion * len)`` uniformly chosen positions.

    Used at test time to probe order sensitivity; unlike
    :func:`shuffle_tokens` the number of shuffled positions is fixed.
    """
    if not 0.0 <= proportion <= 1.0:
        raise ValueError("proportion must lie in [0, 1]")
    tokens = np.asarray(tokens)
    m = min(len(tokens), math.ceil(round(proportion * len(tokens), 9)))
    out = tokens.copy()
    if m > 1:
        picked = np.sort(rng.choice(len(tokens), size=m, replace=False))
        out[picked] = _fisher_yates(tokens[picked], rng)
    return out
