"""Truncated lattice codebooks and subtractive dithered quantization.

Two lattices are supported: the scalar lattice ``Δ Z`` (one coordinate
per sub-vector) and the hexagonal lattice with generator columns
``Δ(1, 0)`` and ``Δ(1/2, √3/2)`` (two coordinates per sub-vector).  The
codebook keeps the points strictly inside radius ``γ``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import ConfigError, DecodeError
from .rng import stream

KIND_CODES = {"scalar": 1, "hexagonal": 2}
_ROUND = 9  # decimals used when comparing point norms
_HEX_ATTEMPTS = 16


def generator_matrix(kind: str, delta: float) -> np.ndarray:
    if kind == "scalar":
        return np.array([[delta]], dtype=np.float64)
    if kind == "hexagonal":
        return delta * np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])
    raise ConfigError(f"unknown lattice kind {kind!r}; expected scalar or hexagonal")


def _enumerate(G: np.ndarray, radius: float) -> np.ndarray:
    """All points of ``G Z^L`` with norm < radius (unordered)."""
    L = G.shape[0]
    s_min = np.linalg.svd(G, compute_uv=False).min()
    r = int(math.ceil(radius / s_min))
    axis = np.arange(-r, r + 1, dtype=np.float64)
    grid = np.stack(np.meshgrid(*([axis] * L), indexing="ij"), axis=-1).reshape(-1, L)
    pts = grid @ G.T
    return pts[np.linalg.norm(pts, axis=1) < radius]


def _canonical(pts: np.ndarray) -> np.ndarray:
    norms = np.round(np.linalg.norm(pts, axis=1), _ROUND)
    keys = [np.round(pts[:, j], _ROUND) for j in range(pts.shape[1] - 1, -1, -1)] + [norms]
    return pts[np.lexsort(keys)]


@dataclass
class Lattice:
    kind: str
    delta: float
    gamma: float
    G: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    covering_radius: float
    outer_radius: float

    @property
    def dim(self) -> int:
        return self.G.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def kind_code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def index_bits(self) -> int:
        """Width of one stored index, ceil(log2 |P|)."""
        return max(1, int(math.ceil(math.log2(self.size))))

    @property
    def log2_size(self) -> float:
        return math.log2(self.size)

    @cached_property
    def G_inv(self) -> np.ndarray:
        return np.linalg.inv(self.G)

    @property
    def load_radius(self) -> float:
        """Largest input norm that can never overload, whatever the dither.

        An input of norm ρ plus a dither inside the basic cell rounds to a
        lattice point of norm at most ρ + 2·covering_radius; it stays in
        the codebook while that is below the norm of the closest lattice
        point outside the codebook.
        """
        return (self.outer_radius - 2.0 * self.covering_radius) * (1.0 - 1e-9)

    @cached_property
    def second_moment(self) -> float:
        return cell_second_moment(self)[0]

    @cached_property
    def _index_table(self):
        """Dense map from integer lattice coordinates to codebook index (-1 outside)."""
        z = np.rint(self.points @ self.G_inv.T).astype(np.int64)
        lo = z.min(axis=0)
        table = np.full(tuple(z.max(axis=0) - lo + 1), -1, dtype=np.int64)
        table[tuple((z - lo).T)] = np.arange(self.size)
        return lo, table

    def _closest_neighbour(self, x, z, lo, table):
        # score the point and its 3^L neighbours so exact ties go to the smallest index
        cand = z[:, None, :] + _kernels._offsets(self.dim).astype(np.int64)[None]
        rel = cand - lo
        shape = np.asarray(table.shape)
        valid = np.all((rel >= 0) & (rel < shape), axis=2)
        ids = np.full(valid.shape, -1, dtype=np.int64)
        ids[valid] = table[tuple(rel[valid].T)]
        diff = x[:, None, :] - self.points[np.maximum(ids, 0)]
        sq = diff[..., 0] * diff[..., 0]
        for j in range(1, self.dim):
            sq = sq + diff[..., j] * diff[..., j]
        sq[ids < 0] = np.inf
        best = sq.min(axis=1, keepdims=True)
        ids[sq != best] = np.iinfo(np.int64).max
        return ids.min(axis=1)

    def nearest(self, x: np.ndarray):
        """Codebook index nearest to each row of ``x`` and the overload flags.

        When the nearest point of the full lattice lies inside the codebook
        it is the answer; overloaded rows fall back to exhaustive search.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        z = _kernels.lattice_round(self.G, self.G_inv, x)
        full = z @ self.G.T
        overload = np.linalg.norm(full, axis=1) >= self.gamma
        lo, table = self._index_table
        idx = np.empty(x.shape[0], dtype=np.int64)
        inside = ~overload
        if inside.any():
            idx[inside] = self._closest_neighbour(x[inside], z[inside], lo, table)
        if overload.any():
            idx[overload] = _kernels.nearest_index(self.points, x[overload])
        return idx, overload


def build_lattice(kind: str, delta: float, gamma: float) -> Lattice:
    if not delta > 0:
        raise ConfigError(f"lattice step must be positive, got {delta}")
    if not gamma > delta:
        raise ConfigError(f"codebook radius must exceed the step (gamma={gamma}, delta={delta})")
    G = generator_matrix(kind, delta)
    pts = _canonical(_enumerate(G, gamma))
    wider = _enumerate(G, gamma + 2.0 * delta)
    outside = np.linalg.norm(wider, axis=1)
    outside = outside[outside >= gamma]
    r_cov = delta / 2.0 if kind == "scalar" else delta / math.sqrt(3.0)
    lat = Lattice(kind, float(delta), float(gamma), G, pts, r_cov, float(outside.min()))
    if lat.load_radius <= 0:
        raise ConfigError(f"codebook with gamma={gamma} is too small to hold any input without overload")
    return lat


def lattice_for_rate(kind: str, rate: float, delta: float = 1.0) -> Lattice:
    """Largest origin-centred codebook with at most 2^(L*rate) points.

    The radius is placed midway between the last included shell and the
    next one.
    """
    G = generator_matrix(kind, delta)
    L = G.shape[0]
    budget = 2.0 ** (L * rate)
    r = delta * (budget ** (1.0 / L) + 3.0)
    norms = np.round(np.linalg.norm(_enumerate(G, r), axis=1), _ROUND)
    shells, counts = np.unique(norms, return_counts=True)
    total = np.cumsum(counts)
    k = int(np.searchsorted(total, budget, side="right")) - 1
    if k < 1:
        raise ConfigError(f"rate {rate} leaves room for the origin only on the {kind} lattice")
    gamma = 0.5 * (shells[k] + shells[k + 1])
    return build_lattice(kind, delta, gamma)


def lattice_from_code(code: int, delta: float, gamma: float) -> Lattice:
    for name, c in KIND_CODES.items():
        if c == code:
            return build_lattice(name, delta, gamma)
    raise ConfigError(f"unknown lattice kind code {code}")


# ----------------------------------------------------------------------
# dither
# ----------------------------------------------------------------------


def _hex_block(lattice: Lattice, rng: np.random.Generator, n: int):
    """``n`` attempts-per-row blocks; returns (draws, accepted mask)."""
    half_w = lattice.delta / 2.0
    half_h = lattice.delta / math.sqrt(3.0)
    box = rng.uniform(size=(n, _HEX_ATTEMPTS, 2))
    box[..., 0] = (2.0 * box[..., 0] - 1.0) * half_w
    box[..., 1] = (2.0 * box[..., 1] - 1.0) * half_h
    # inside the Voronoi hexagon of the origin: closer to 0 than to the six neighbours
    x, y = box[..., 0], box[..., 1]
    s = math.sqrt(3.0) / 2.0 * y
    ok = (np.abs(x) <= half_w) & (np.abs(0.5 * x + s) <= half_w) & (np.abs(0.5 * x - s) <= half_w)
    return box, ok


def sample_dither(lattice: Lattice, rng: np.random.Generator, n: int, fallback=None) -> np.ndarray:
    """``n`` dither vectors uniform over the basic cell, shape (n, L).

    Scalar: uniform on [-Δ/2, Δ/2).  Hexagonal: rejection sampling from
    the bounding box of the Voronoi hexagon; row m uses its own block of
    attempts so it depends only on its position in the stream.  A row
    whose block has no acceptance (probability 4^-16) is redrawn from
    ``fallback(m)``, a generator factory, or from ``rng`` when none is given.
    """
    if lattice.kind == "scalar":
        half = lattice.delta / 2.0
        return rng.uniform(-half, half, size=(n, 1))
    box, ok = _hex_block(lattice, rng, n)
    first = np.argmax(ok, axis=1)
    out = box[np.arange(n), first].copy()
    for m in np.flatnonzero(~ok.any(axis=1)):
        r = fallback(int(m)) if fallback is not None else rng
        while True:
            b, k = _hex_block(lattice, r, 1)
            if k.any():
                out[m] = b[0, int(np.argmax(k[0]))]
                break
    return out


def keyed_dithers(lattice: Lattice, seed: int, t: int, user: int, n: int) -> np.ndarray:
    """Dithers for sub-vectors 0..n-1 of ``user`` in round ``t``.

    Row m is a function of (seed, t, user, m) only, so encoder and decoder
    regenerate identical values without storing them.
    """
    return sample_dither(lattice, stream(seed, "dither", t, user), n,
                         fallback=lambda m: stream(seed, "dither", t, user, m + 1))


def cell_second_moment(lattice: Lattice, mc_samples: int = 200_000, seed: int = 0):
    """E‖d‖² for d uniform on the basic cell, with its standard error.

    Exact Δ²/12 on the scalar lattice; Monte Carlo on the hexagonal one.
    """
    if lattice.kind == "scalar":
        return lattice.delta ** 2 / 12.0, 0.0
    if mc_samples < 10_000:
        raise ConfigError("hexagonal second moment needs at least 1e4 Monte Carlo samples")
    d = sample_dither(lattice, stream(seed, "mc", 0), int(mc_samples))
    sq = (d * d).sum(axis=1)
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))


# ----------------------------------------------------------------------
# subtractive dithered quantization
# ----------------------------------------------------------------------


def nearest_point(lattice: Lattice, x):
    """(index, overload) for a single vector."""
    idx, ov = lattice.nearest(np.atleast_1d(np.asarray(x, dtype=np.float64)))
    return int(idx[0]), bool(ov[0])


def sdq_encode(lattice: Lattice, x: np.ndarray, d: np.ndarray):
    """Indices of the codebook points nearest to ``x + d`` (row-wise) and overload flags."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, lattice.dim)
    d = np.asarray(d, dtype=np.float64).reshape(-1, lattice.dim)
    return lattice.nearest(x + d)


def sdq_decode(lattice: Lattice, idx: np.ndarray, d: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= lattice.size):
        raise DecodeError(f"point index outside codebook of {lattice.size} points")
    d = np.asarray(d, dtype=np.float64).reshape(-1, lattice.dim)
    return lattice.points[idx] - d
