"""Seeded choice of which users' gradients are stored in each round."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .rng import stream


def select_users(U: int, Ubar: int, t: int, seed: int, replacement: bool = False) -> np.ndarray:
    """Ū user ids (1-based) drawn uniformly from the stream keyed (seed, t).

    Without replacement the ids are distinct; with replacement repeats may
    occur and ``Ubar`` may exceed ``U``.  Order is the draw order.
    """
    if Ubar < 1:
        raise ConfigError(f"stored-user count must be >= 1, got {Ubar}")
    if not replacement and Ubar > U:
        raise ConfigError(f"cannot store {Ubar} distinct users out of {U}")
    rng = stream(seed, "select", t)
    if replacement:
        return rng.integers(1, U + 1, size=Ubar)
    return rng.choice(U, size=Ubar, replace=False) + 1


def slot_counts(selected: np.ndarray):
    """Distinct ids in ascending order and how often each was drawn."""
    users, counts = np.unique(np.asarray(selected, dtype=np.int64), return_counts=True)
    return users, counts
