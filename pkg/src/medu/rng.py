"""Keyed random streams.

Every consumer of randomness asks for a generator keyed by
``(master seed, domain, *key)``.  Keys are spawned through
:class:`numpy.random.SeedSequence`, so streams for distinct keys are
independent and a stream can be regenerated from its key alone, which is
what lets the decoder rebuild user selections and dithers without storing
them.
"""

from __future__ import annotations

import numpy as np

DOMAINS = {
    "init": 1,
    "partition": 2,
    "local": 3,
    "select": 4,
    "dither": 5,
    "data": 6,
    "backdoor": 7,
    "mc": 8,
    "adapt": 9,
}


def seed_sequence(seed: int, domain: str, *key: int) -> np.random.SeedSequence:
    if domain not in DOMAINS:
        raise KeyError(f"unknown rng domain {domain!r}")
    parts = (DOMAINS[domain],) + tuple(int(k) for k in key)
    if any(p < 0 for p in parts):
        raise ValueError(f"rng key parts must be non-negative, got {parts}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=parts)


def stream(seed: int, domain: str, *key: int) -> np.random.Generator:
    """Generator for ``(seed, domain, *key)``; identical keys give identical draws."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, domain, *key)))
