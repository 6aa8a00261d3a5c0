"""Compressed gradient history: encoder, mirror decoder and history sinks.

Per round the encoder

1. regenerates the seeded set of users whose gradients are stored,
2. splits each stored gradient into sub-vectors of length L and keeps
   only those that moved at least δ_t away from the last decoded value
   (all of them the first time a user is stored),
3. scales the kept sub-vectors by one per-slot factor and quantizes them
   with a subtractive dither on a truncated lattice.

The decoder replays the same steps from the seed: it rebuilds the
selection and the dithers, recovers the kept sub-vectors and fills the
rest from each user's last recovered value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DecodeError
from .fl import RoundGradients
from .lattice import build_lattice, keyed_dithers, lattice_for_rate, lattice_from_code
from .store import (KIND_IDENTITY, MODE_MEDU, MODE_RAW, EncodedRound, HistoryStore, RawRound,
                    SlotRecord, StoreHeader, check_slot)

log = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    """Compression settings.

    The codebook is either given by ``gamma`` or derived from ``rate``
    (bits per coordinate).  ``threshold_kind='decaying'`` uses
    δ_t = threshold * η_t.  ``bypass`` swaps the lattice for an exact
    identity quantizer while keeping the sub-vector length of
    ``lattice_kind``.
    """

    Ubar: int
    replacement: bool = False
    threshold: float = 0.0
    threshold_kind: str = "constant"
    lattice_kind: str = "hexagonal"
    delta: float = 1.0
    gamma: float | None = None
    rate: float | None = 4.0
    seed: int = 0
    bypass: bool = False

    def __post_init__(self):
        if self.Ubar < 1:
            raise ConfigError(f"stored-user count must be >= 1, got {self.Ubar}")
        if self.threshold < 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if self.threshold_kind not in ("constant", "decaying"):
            raise ConfigError(f"unknown threshold schedule {self.threshold_kind!r}")
        if self.lattice_kind not in ("scalar", "hexagonal"):
            raise ConfigError(f"unknown lattice kind {self.lattice_kind!r}")
        if not self.bypass and self.gamma is None and self.rate is None:
            raise ConfigError("give either gamma or rate for the codebook")

    @property
    def L(self) -> int:
        return 1 if self.lattice_kind == "scalar" else 2

    def threshold_at(self, t: int, eta: float) -> float:
        return self.threshold * eta if self.threshold_kind == "decaying" else self.threshold

    def lattice(self):
        if self.bypass:
            return None
        if self.gamma is not None:
            return _cached_lattice(self.lattice_kind, float(self.delta), float(self.gamma))
        lat = lattice_for_rate(self.lattice_kind, self.rate, self.delta)
        return _cached_lattice(lat.kind, lat.delta, lat.gamma)

    def header(self, U: int, M: int) -> StoreHeader:
        if not self.replacement and self.Ubar > U:
            raise ConfigError(f"cannot store {self.Ubar} distinct users out of {U}")
        lat = self.lattice()
        if lat is None:
            return StoreHeader(MODE_MEDU, U, M, self.L, KIND_IDENTITY, 0.0, 0.0, self.Ubar, self.replacement, self.seed)
        return StoreHeader(MODE_MEDU, U, M, lat.dim, lat.kind_code, lat.delta, lat.gamma, self.Ubar,
                           self.replacement, self.seed)


@lru_cache(maxsize=32)
def _cached_lattice(kind, delta, gamma):
    return build_lattice(kind, delta, gamma)


@lru_cache(maxsize=32)
def _lattice_from_header(code, delta, gamma):
    return lattice_from_code(code, delta, gamma)


def header_lattice(h: StoreHeader):
    return None if h.bypass else _lattice_from_header(h.kind, h.delta, h.gamma)


def split(g: np.ndarray, n_sub: int, L: int) -> np.ndarray:
    """Zero-pad a length-M vector to n_sub*L and reshape to (n_sub, L)."""
    out = np.zeros(n_sub * L)
    out[:g.size] = g
    return out.reshape(n_sub, L)


def _reconstruct(h: StoreHeader, lat, t: int, slot: SlotRecord, d=None) -> np.ndarray:
    """Decoded values of the stored sub-vectors of one slot, shape (k, L).

    ``d`` are the dithers of the stored sub-vectors when already known.
    """
    if h.bypass:
        return np.asarray(slot.payload, dtype=np.float64).reshape(-1, h.L)
    if d is None:
        d = keyed_dithers(lat, h.seed, t, slot.user, h.n_sub)[slot.bitmap]
    return slot.scale * (lat.points[slot.payload] - d)


@dataclass
class EncoderState:
    """Mirror of the decoder: last decoded sub-vectors and last stored round per user."""

    refs: dict = field(default_factory=dict)
    last_round: dict = field(default_factory=dict)
    overloads: int = 0
    next_t: int = 0


def encode_round(state: EncoderState, h: StoreHeader, lat, rg: RoundGradients, delta_t: float) -> EncodedRound:
    """Encode one round of all U users' gradients; updates ``state`` in place."""
    if rg.t != state.next_t:
        raise ConfigError(f"rounds must be encoded in order: expected t={state.next_t}, got t={rg.t}")
    if rg.grads.shape != (h.U, h.M) or not np.array_equal(rg.users, np.arange(1, h.U + 1)):
        raise ConfigError(f"round {rg.t} must carry gradients of all {h.U} users with {h.M} coordinates")
    rec = EncodedRound(rg.t, float(delta_t))
    users, counts = h.slots(rg.t)
    for u, c in zip(users.tolist(), counts.tolist()):
        sub = split(rg.grads[u - 1], h.n_sub, h.L)
        ref = state.refs.get(u)
        if ref is None:
            mask = np.ones(h.n_sub, dtype=bool)
        else:
            mask = np.linalg.norm(sub - ref, axis=1) >= delta_t
        kept = sub[mask]
        d = None
        if h.bypass:
            scale = 1.0
            payload = kept.copy()
        else:
            peak = float(np.linalg.norm(kept, axis=1).max()) if kept.size else 0.0
            scale = peak / lat.load_radius if peak > 0 else 1.0
            d = keyed_dithers(lat, h.seed, rg.t, u, h.n_sub)[mask]
            payload, overload = lat.nearest(kept / scale + d)
            n_over = int(overload.sum())
            if n_over:
                state.overloads += n_over
                log.warning("round %d user %d: %d overloaded sub-vectors clipped", rg.t, u, n_over)
        slot = SlotRecord(u, c, scale, mask, payload)
        rec.slots.append(slot)
        new_ref = np.zeros((h.n_sub, h.L)) if ref is None else ref.copy()
        new_ref[mask] = _reconstruct(h, lat, rg.t, slot, d)
        state.refs[u] = new_ref
        state.last_round[u] = rg.t
    state.next_t += 1
    return rec


class MeduSink:
    """History sink that compresses each round as it arrives."""

    def __init__(self, config: CodecConfig, U: int, M: int):
        self.config = config
        self.store = HistoryStore(config.header(U, M))
        self.lattice = config.lattice()
        self.state = EncoderState()

    def append(self, rg: RoundGradients):
        delta_t = self.config.threshold_at(rg.t, rg.eta)
        self.store.append(encode_round(self.state, self.store.header, self.lattice, rg, delta_t))

    def close(self):
        pass


class RawSink:
    """History sink that keeps every gradient at full precision."""

    def __init__(self, U: int, M: int):
        self.store = HistoryStore(StoreHeader(MODE_RAW, U, M))

    def append(self, rg: RoundGradients):
        U = self.store.header.U
        if rg.grads.shape[0] != U:
            raise ConfigError(f"raw store needs all {U} users every round")
        self.store.append(RawRound(rg.t, rg.grads.copy()))

    def close(self):
        pass


# ----------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------


@dataclass
class DecodedRound:
    """Recovered gradients of the stored users of round ``t``.

    ``grads[i]`` belongs to ``users[i]``, drawn ``counts[i]`` times.
    """

    t: int
    users: np.ndarray
    counts: np.ndarray
    grads: np.ndarray


def decode_rounds(store: HistoryStore):
    """Yield a :class:`DecodedRound` per round, t ascending."""
    h = store.header
    if h.mode != MODE_MEDU:
        raise ConfigError("decoding needs a medu-mode store")
    lat = header_lattice(h)
    n_points = 0 if lat is None else lat.size
    last = {}
    for rec in store.rounds:
        users, counts, grads = [], [], []
        expect_users, expect_counts = h.slots(rec.t)
        got = [s.user for s in rec.slots]
        if got != expect_users.tolist():
            raise DecodeError(f"slots {got} do not match the regenerated selection {expect_users.tolist()}", rec.t)
        for slot, c in zip(rec.slots, expect_counts.tolist()):
            check_slot(h, rec.t, slot, n_points)
            prev = last.get(slot.user)
            if prev is None and not slot.bitmap.all():
                raise DecodeError("first stored record of a user must carry every sub-vector", rec.t, slot.user)
            cur = np.zeros((h.n_sub, h.L)) if prev is None else prev.copy()
            cur[slot.bitmap] = _reconstruct(h, lat, rec.t, slot)
            last[slot.user] = cur
            users.append(slot.user)
            counts.append(c)
            grads.append(cur.reshape(-1)[:h.M].copy())
        yield DecodedRound(rec.t, np.asarray(users, dtype=np.int64), np.asarray(counts, dtype=np.int64),
                           np.vstack(grads) if grads else np.zeros((0, h.M)))


def decode_history(store: HistoryStore, exclude: int):
    """Decoded rounds with user ``exclude`` removed from every round."""
    out = []
    for dr in decode_rounds(store):
        keep = dr.users != exclude
        out.append(DecodedRound(dr.t, dr.users[keep], dr.counts[keep], dr.grads[keep]))
    return out


def d3_scaled(dr: DecodedRound, U: int) -> np.ndarray:
    """(U, M) array: each surviving user's gradient times (U-1)/|V_t|, zero rows elsewhere.

    |V_t| counts draws with multiplicity; a user drawn k times carries k
    copies.  Averaging these rows with divisor U-1 gives the same round
    term as averaging the unscaled gradients over V_t.
    """
    M = dr.grads.shape[1]
    out = np.zeros((U, M))
    n = int(dr.counts.sum())
    if n == 0:
        return out
    for u, c, g in zip(dr.users, dr.counts, dr.grads):
        out[u - 1] = c * ((U - 1) / n) * g
    return out


def mirror_refs(store: HistoryStore, t: int) -> dict:
    """Decoder-side last recovered gradient of every user stored up to round ``t``."""
    refs = {}
    for dr in decode_rounds(store):
        if dr.t > t:
            break
        for u, g in zip(dr.users.tolist(), dr.grads):
            refs[u] = g
    return refs
