"""Counter-style random streams and dropout masks."""
from __future__ import annotations

import numpy as np


class Rng:
    """Seeded factory of independent numpy generators.

    A stream is keyed by a tuple of non-negative integers, e.g.
    ``(layer_id, step, sample_id)``.  The same ``(seed, keys)`` always yields
    the same draws, so streams can be pre-split before any parallel work.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *keys: int) -> np.random.Generator:
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def dropout_mask(rng: Rng, p: float, shape, keys=(), sample_ids=None,
                 inverted: bool = True, dtype=np.float64) -> np.ndarray:
    """Multiplicative dropout mask of ``shape`` (leading axis = batch).

    Row ``r`` is drawn from the stream ``(*keys, sample_ids[r])`` so a sample
    gets the same mask whatever batch it sits in.  With ``inverted`` the kept
    elements are scaled by ``1 / (1 - p)``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    n = shape[0]
    if sample_ids is None:
        sample_ids = range(n)
    elif len(sample_ids) != n:
        raise ValueError("sample_ids length must match the batch size")
    mask = np.empty(shape, dtype=dtype)
    keep_value = 1.0 / (1.0 - p) if inverted else 1.0
    for r, sid in enumerate(sample_ids):
        u = rng.stream(*keys, sid).random(shape[1:])
        mask[r] = np.where(u >= p, keep_value, 0.0)
    return mask
