"""Unlearning from a stored gradient history and model distances."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import d3_scaled, decode_history
from .errors import ConfigError
from .store import MODE_MEDU, MODE_RAW, HistoryStore

log = logging.getLogger(__name__)


def _etas(schedule, n_rounds):
    if callable(schedule):
        return np.array([schedule(t) for t in range(n_rounds)], dtype=np.float64)
    etas = np.asarray(schedule, dtype=np.float64)
    if etas.shape != (n_rounds,):
        raise ConfigError(f"need {n_rounds} learning rates, got {etas.shape}")
    return etas


def _check_user(store: HistoryStore, user: int):
    U = store.header.U
    if U < 2:
        raise ConfigError("unlearning needs at least 2 users")
    if not 1 <= user <= U:
        raise ConfigError(f"user to unlearn must be in [1, {U}], got {user}")


def unlearn_full(w0: np.ndarray, store: HistoryStore, user: int, schedule) -> np.ndarray:
    """w0 minus every round's learning rate times the mean gradient of the other U-1 users."""
    if store.mode != MODE_RAW:
        raise ConfigError("unlearn_full needs a raw-mode store; use unlearn_medu for compressed histories")
    _check_user(store, user)
    U = store.header.U
    etas = _etas(schedule, store.n_rounds)
    w = np.array(w0, dtype=np.float64)
    for r, eta in zip(store.rounds, etas):
        acc = np.zeros(store.header.M)
        for u in range(1, U + 1):
            if u != user:
                acc += r.grads[u - 1]
        w = w - eta * (acc / (U - 1))
    return w


def unlearn_medu(w0: np.ndarray, store: HistoryStore, user: int, schedule, decoded=None) -> np.ndarray:
    """w0 minus every round's learning rate times the mean recovered gradient over the
    stored users other than ``user`` (counted with multiplicity).

    A round in which only ``user`` was stored contributes nothing.
    """
    if store.mode != MODE_MEDU:
        raise ConfigError("unlearn_medu needs a medu-mode store")
    _check_user(store, user)
    etas = _etas(schedule, store.n_rounds)
    decoded = decode_history(store, user) if decoded is None else decoded
    w = np.array(w0, dtype=np.float64)
    for dr, eta in zip(decoded, etas):
        n = int(dr.counts.sum())
        if n == 0:
            log.info("round %d: no stored user besides %d, round skipped", dr.t, user)
            continue
        acc = np.zeros(store.header.M)
        for c, g in zip(dr.counts, dr.grads):
            acc += c * g
        w = w - eta * (acc / n)
    return w


def unlearn_medu_d3(w0: np.ndarray, store: HistoryStore, user: int, schedule, decoded=None) -> np.ndarray:
    """Same model as :func:`unlearn_medu`, written with the (U-1)/|V_t|-scaled
    gradients of all U users and a fixed divisor U-1."""
    U = store.header.U
    etas = _etas(schedule, store.n_rounds)
    decoded = decode_history(store, user) if decoded is None else decoded
    w = np.array(w0, dtype=np.float64)
    for dr, eta in zip(decoded, etas):
        scaled = d3_scaled(dr, U)
        acc = np.zeros(store.header.M)
        for u in range(1, U + 1):
            if u != user:
                acc += scaled[u - 1]
        w = w - eta * (acc / (U - 1))
    return w


def model_l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"cannot compare vectors of shapes {a.shape} and {b.shape}")
    d = a - b
    return float(d @ d)


@dataclass
class UnlearnReport:
    mode: str
    user: int
    params: list
    dist_to_retrain: float | None = None
    paper_bits: float | None = None
    packed_bits: int | None = None
    overloads: int = 0
    wall_time: float = 0.0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("retrain", "fu", "medu"):
            raise ConfigError(f"unknown unlearning mode {self.mode!r}")
        if self.dist_to_retrain is not None and self.dist_to_retrain < 0:
            raise ValueError("distance must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
