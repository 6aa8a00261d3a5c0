"""In-memory history store and its little-endian file format.

Layout::

    header   magic "MEDUHIST", version u16, mode u8 (0 raw, 1 medu),
             U u32, M u64, L u16, lattice kind u8, Δ f64, γ f64,
             Ū u16, replacement u8, master seed u64, round count u32
    raw round   t u32, then U*M f64 in (user, coordinate) order
    medu round  t u32, δ_t f64, then one slot per distinct selected user
                in ascending id order:
                  scale f64
                  presence bitmap, ceil(n_sub/8) bytes, LSB-first
                  payload: |stored| indices of ceil(log2|P|) bits each,
                           LSB-first, zero-padded to a byte
                           (identity kind: |stored|*L f64 values)

Slot count and payload length are not written; they follow from the
regenerated user selection and the bitmap popcount.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DecodeError, StoreFormatError
from .sampling import select_users, slot_counts

MAGIC = b"MEDUHIST"
VERSION = 1
MODE_RAW = 0
MODE_MEDU = 1
KIND_NONE = 0
KIND_IDENTITY = 3

_HEAD = struct.Struct("<8sHBIQHBddHBQI")
_RAW_ROUND = struct.Struct("<I")
_MEDU_ROUND = struct.Struct("<Id")
_F64 = struct.Struct("<d")


@dataclass
class StoreHeader:
    mode: int
    U: int
    M: int
    L: int = 1
    kind: int = KIND_NONE
    delta: float = 0.0
    gamma: float = 0.0
    Ubar: int = 0
    replacement: bool = False
    seed: int = 0

    @property
    def n_sub(self) -> int:
        return -(-self.M // self.L)

    @property
    def bypass(self) -> bool:
        return self.kind == KIND_IDENTITY

    def point_count(self) -> int:
        from .lattice import lattice_from_code

        return lattice_from_code(self.kind, self.delta, self.gamma).size

    def slots(self, t: int):
        return slot_counts(select_users(self.U, self.Ubar, t, self.seed, self.replacement))


@dataclass
class RawRound:
    t: int
    grads: np.ndarray  # (U, M)

    def __eq__(self, other):
        return isinstance(other, RawRound) and self.t == other.t and np.array_equal(self.grads, other.grads)


@dataclass
class SlotRecord:
    """One stored user in one round.

    ``payload`` holds codebook indices (lattice kinds) or a (k, L) float
    array of exact sub-vectors (identity kind).
    """

    user: int
    count: int
    scale: float
    bitmap: np.ndarray
    payload: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, SlotRecord) and self.user == other.user and self.count == other.count
                and _F64.pack(self.scale) == _F64.pack(other.scale)
                and np.array_equal(self.bitmap, other.bitmap) and np.array_equal(self.payload, other.payload))


@dataclass
class EncodedRound:
    t: int
    delta_t: float
    slots: list = field(default_factory=list)

    def __eq__(self, other):
        return (isinstance(other, EncodedRound) and self.t == other.t
                and _F64.pack(self.delta_t) == _F64.pack(other.delta_t) and self.slots == other.slots)


class HistoryStore:
    """Header plus rounds in strictly increasing t starting at 0."""

    def __init__(self, header: StoreHeader, rounds=None):
        self.header = header
        self.rounds = []
        for r in rounds or []:
            self.append(r)

    @property
    def mode(self) -> int:
        return self.header.mode

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def append(self, record):
        want = len(self.rounds)
        if record.t != want:
            raise StoreFormatError(f"expected round {want}, got {record.t}", round_index=record.t)
        if self.header.mode == MODE_RAW and not isinstance(record, RawRound):
            raise StoreFormatError("raw store accepts raw rounds only", round_index=record.t)
        if self.header.mode == MODE_MEDU and not isinstance(record, EncodedRound):
            raise StoreFormatError("medu store accepts encoded rounds only", round_index=record.t)
        self.rounds.append(record)

    def __eq__(self, other):
        return isinstance(other, HistoryStore) and self.header == other.header and self.rounds == other.rounds

    # ------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        return serialize_store(self)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(serialize_store(self))

    @classmethod
    def load(cls, path) -> "HistoryStore":
        with open(path, "rb") as fh:
            return parse_store(fh.read())


def _index_width(h: StoreHeader) -> int:
    if h.bypass:
        return 64 * h.L
    from .lattice import lattice_from_code

    return lattice_from_code(h.kind, h.delta, h.gamma).index_bits


def _bitmap_bytes(h: StoreHeader) -> int:
    return -(-h.n_sub // 8)


def serialize_store(store: HistoryStore) -> bytes:
    h = store.header
    out = [_HEAD.pack(MAGIC, VERSION, h.mode, h.U, h.M, h.L, h.kind, h.delta, h.gamma, h.Ubar,
                      int(h.replacement), h.seed, len(store.rounds))]
    if h.mode == MODE_RAW:
        for r in store.rounds:
            out.append(_RAW_ROUND.pack(r.t))
            out.append(np.ascontiguousarray(r.grads, dtype="<f8").tobytes())
        return b"".join(out)
    width = None if h.bypass else _index_width(h)
    for r in store.rounds:
        out.append(_MEDU_ROUND.pack(r.t, r.delta_t))
        for s in r.slots:
            out.append(_F64.pack(s.scale))
            out.append(np.packbits(s.bitmap.astype(np.uint8), bitorder="little").tobytes())
            if h.bypass:
                out.append(np.ascontiguousarray(s.payload, dtype="<f8").tobytes())
            else:
                out.append(_kernels.pack_bits(s.payload.astype(np.uint64), width).tobytes())
    return b"".join(out)


def expected_size(store: HistoryStore) -> int:
    """File size in bytes implied by the format for this store's contents."""
    h = store.header
    size = _HEAD.size
    if h.mode == MODE_RAW:
        return size + len(store.rounds) * (_RAW_ROUND.size + 8 * h.U * h.M)
    width = _index_width(h)
    for r in store.rounds:
        size += _MEDU_ROUND.size
        for s in r.slots:
            k = int(s.bitmap.sum())
            size += 8 + _bitmap_bytes(h) + -(-k * width // 8)
    return size


def parse_store(buf: bytes) -> HistoryStore:
    if len(buf) < _HEAD.size:
        raise StoreFormatError(f"file holds {len(buf)} bytes, shorter than the {_HEAD.size}-byte header")
    (magic, version, mode, U, M, L, kind, delta, gamma, Ubar, repl, seed, n_rounds) = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"unsupported format version {version}")
    if mode not in (MODE_RAW, MODE_MEDU):
        raise StoreFormatError(f"unknown mode byte {mode}")
    if U < 2 or M < 1 or L < 1:
        raise StoreFormatError(f"implausible header U={U} M={M} L={L}")
    h = StoreHeader(mode, U, M, L, kind, delta, gamma, Ubar, bool(repl), seed)
    store = HistoryStore(h)
    pos = _HEAD.size
    view = memoryview(buf)

    def need(n, t):
        if pos + n > len(buf):
            raise StoreFormatError(f"truncated: needs {n} more bytes at offset {pos}", round_index=t)

    if mode == MODE_RAW:
        for i in range(n_rounds):
            need(_RAW_ROUND.size + 8 * U * M, i)
            (t,) = _RAW_ROUND.unpack_from(buf, pos)
            pos += _RAW_ROUND.size
            grads = np.frombuffer(view[pos:pos + 8 * U * M], dtype="<f8").astype(np.float64).reshape(U, M)
            pos += 8 * U * M
            store.append(RawRound(t, grads))
    else:
        if Ubar < 1:
            raise StoreFormatError("medu store with zero stored users per round")
        if not repl and Ubar > U:
            raise StoreFormatError(f"header asks for {Ubar} distinct stored users out of {U}")
        try:
            width = _index_width(h)
        except Exception as exc:
            raise StoreFormatError(f"bad lattice parameters in header: {exc}") from exc
        nb = _bitmap_bytes(h)
        for i in range(n_rounds):
            need(_MEDU_ROUND.size, i)
            t, delta_t = _MEDU_ROUND.unpack_from(buf, pos)
            pos += _MEDU_ROUND.size
            if t != i:
                raise StoreFormatError(f"round record carries t={t}", round_index=i)
            rec = EncodedRound(t, delta_t)
            users, counts = h.slots(t)
            for u, c in zip(users, counts):
                need(8 + nb, i)
                (scale,) = _F64.unpack_from(buf, pos)
                pos += 8
                raw_bits = np.unpackbits(np.frombuffer(view[pos:pos + nb], dtype=np.uint8), bitorder="little")
                pos += nb
                if raw_bits[h.n_sub:].any():
                    raise StoreFormatError(f"user {u}: bitmap padding bits set", round_index=i)
                bitmap = raw_bits[:h.n_sub].astype(bool)
                k = int(bitmap.sum())
                nbytes = -(-k * width // 8)
                need(nbytes, i)
                chunk = np.frombuffer(view[pos:pos + nbytes], dtype=np.uint8)
                pos += nbytes
                if h.bypass:
                    payload = chunk.view("<f8").astype(np.float64).reshape(k, L)
                else:
                    payload = _kernels.unpack_bits(chunk, width, k).astype(np.int64)
                rec.slots.append(SlotRecord(int(u), int(c), float(scale), bitmap, payload))
            store.append(rec)
    if pos != len(buf):
        raise StoreFormatError(f"{len(buf) - pos} trailing bytes after round {n_rounds - 1}")
    return store


# ----------------------------------------------------------------------
# storage accounting
# ----------------------------------------------------------------------


def storage_fu(U: int, T: int, M: int, b_bits: int = 64) -> int:
    """Bits for the uncompressed history of rounds 0..T."""
    return U * (T + 1) * M * b_bits


def storage_bits(store: HistoryStore):
    """(idealized bits, packed payload bits).

    Idealized: per stored user n_sub presence bits plus log2|P| bits per
    stored sub-vector.  Packed adds a 64-bit scale per slot and rounds the
    index width up to whole bits.  The identity quantizer is charged 64*L
    bits per stored sub-vector in both figures.  Raw stores report
    U*(T+1)*M*64 for both.
    """
    h = store.header
    if h.mode == MODE_RAW:
        bits = h.U * len(store.rounds) * h.M * 64
        return float(bits), bits
    if h.bypass:
        per_ideal = per_packed = 64 * h.L
    else:
        from .lattice import lattice_from_code

        lat = lattice_from_code(h.kind, h.delta, h.gamma)
        per_ideal, per_packed = lat.log2_size, lat.index_bits
    ideal = 0.0
    packed = 0
    for r in store.rounds:
        for s in r.slots:
            k = int(s.bitmap.sum())
            ideal += h.n_sub + k * per_ideal
            packed += 64 + h.n_sub + k * per_packed
    return ideal, packed


def storage_bound(U: int, Ubar: int, T: int, M: int, L: int, point_count: int, b_bits: int = 64) -> float:
    """Guaranteed ceiling on the idealized MEDU bits for rounds 0..T."""
    if min(U, Ubar, M, L, point_count, b_bits) <= 0 or T < 0:
        raise ValueError("storage bound needs positive arguments")
    factor = (Ubar / U) * ((1.0 + math.log2(point_count)) / L) / b_bits
    return factor * storage_fu(U, T, M, b_bits)


def check_slot(h: StoreHeader, t: int, slot: SlotRecord, point_count: int):
    """Raise DecodeError when a slot cannot be decoded."""
    k = int(slot.bitmap.sum())
    if slot.bitmap.shape != (h.n_sub,):
        raise DecodeError(f"bitmap has {slot.bitmap.size} bits, expected {h.n_sub}", t, slot.user)
    if len(slot.payload) != k:
        raise DecodeError(f"{len(slot.payload)} payload entries for {k} presence bits", t, slot.user)
    if not (np.isfinite(slot.scale) and slot.scale > 0):
        raise DecodeError(f"scale {slot.scale} is not a positive finite number", t, slot.user)
    if not h.bypass and not np.isfinite(slot.scale * (h.gamma + h.delta)):
        raise DecodeError(f"scale {slot.scale} overflows the decoded values", t, slot.user)
    if h.bypass and k and not np.all(np.isfinite(slot.payload)):
        raise DecodeError("stored value is not finite", t, slot.user)
    if not h.bypass and k and (slot.payload.min() < 0 or slot.payload.max() >= point_count):
        raise DecodeError(f"point index outside codebook of {point_count} points", t, slot.user)
