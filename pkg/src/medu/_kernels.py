"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics.  The numba path is used when numba
imports cleanly, unless ``MEDU_DISABLE_NUMBA=1`` is set in the
environment before import.  Both variants stay importable under explicit
names so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("MEDU_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is optional
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLE
BACKEND = "numba" if USE_NUMBA else "numpy"

_CHUNK = 4096


# ----------------------------------------------------------------------
# nearest codeword by exhaustive search
# ----------------------------------------------------------------------


def nearest_index_numpy(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise argmin of squared distance to ``points``; first minimum wins."""
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        diff = x[lo:lo + _CHUNK, None, :] - points[None, :, :]
        sq = diff[..., 0] * diff[..., 0]
        for j in range(1, points.shape[1]):
            sq = sq + diff[..., j] * diff[..., j]
        out[lo:lo + _CHUNK] = np.argmin(sq, axis=1)
    return out


def _nearest_index_py(points, x):
    n, dim = x.shape
    npts = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        arg = 0
        for k in range(npts):
            d = x[i, 0] - points[k, 0]
            s = d * d
            for j in range(1, dim):
                d = x[i, j] - points[k, j]
                s = s + d * d
            if s < best:
                best = s
                arg = k
        out[i] = arg
    return out


# ----------------------------------------------------------------------
# nearest point of the untruncated lattice (L <= 2)
# ----------------------------------------------------------------------


def _offsets(dim: int) -> np.ndarray:
    # (0, ..., 0) first so an exact tie keeps the Babai point
    base = [0, -1, 1]
    if dim == 1:
        return np.array([[b] for b in base], dtype=np.float64)
    return np.array([[a, b] for a in base for b in base], dtype=np.float64)


def lattice_round_numpy(generator: np.ndarray, inverse: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Integer coordinates of the nearest point of the full lattice ``G Z^L``.

    Babai rounding followed by a search over the 3^L neighbouring integer
    vectors; exact for reduced two-dimensional bases.
    """
    offs = _offsets(generator.shape[0])
    z0 = np.rint(x @ inverse.T)
    out = np.empty(z0.shape, dtype=np.int64)
    for lo in range(0, x.shape[0], _CHUNK):
        cand = z0[lo:lo + _CHUNK, None, :] + offs[None, :, :]
        pts = cand @ generator.T
        diff = x[lo:lo + _CHUNK, None, :] - pts
        sq = diff[..., 0] * diff[..., 0]
        for j in range(1, generator.shape[0]):
            sq = sq + diff[..., j] * diff[..., j]
        best = np.argmin(sq, axis=1)
        out[lo:lo + _CHUNK] = cand[np.arange(cand.shape[0]), best].astype(np.int64)
    return out


def _lattice_round_py(generator, inverse, x):
    n, dim = x.shape
    offs = _offsets_nb(dim)
    out = np.empty((n, dim), dtype=np.int64)
    z0 = np.empty(dim)
    cand = np.empty(dim)
    pt = np.empty(dim)
    for i in range(n):
        for a in range(dim):
            acc = 0.0
            for b in range(dim):
                acc += inverse[a, b] * x[i, b]
            z0[a] = np.rint(acc)
        best = np.inf
        for k in range(offs.shape[0]):
            for a in range(dim):
                cand[a] = z0[a] + offs[k, a]
            for a in range(dim):
                acc = 0.0
                for b in range(dim):
                    acc += generator[a, b] * cand[b]
                pt[a] = acc
            d = x[i, 0] - pt[0]
            s = d * d
            for a in range(1, dim):
                d = x[i, a] - pt[a]
                s = s + d * d
            if s < best:
                best = s
                for a in range(dim):
                    out[i, a] = np.int64(cand[a])
    return out


def _offsets_nb(dim):
    if dim == 1:
        o = np.empty((3, 1))
        o[0, 0] = 0.0
        o[1, 0] = -1.0
        o[2, 0] = 1.0
        return o
    o = np.empty((9, 2))
    base = (0.0, -1.0, 1.0)
    k = 0
    for a in range(3):
        for b in range(3):
            o[k, 0] = base[a]
            o[k, 1] = base[b]
            k += 1
    return o


# ----------------------------------------------------------------------
# fixed-width LSB-first bit packing
# ----------------------------------------------------------------------


def pack_bits_numpy(values: np.ndarray, width: int) -> np.ndarray:
    """Pack unsigned integers into ``width``-bit fields, LSB-first, zero-padded."""
    values = np.asarray(values, dtype=np.uint64)
    if values.size == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little")


def unpack_bits_numpy(buf: np.ndarray, width: int, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint64)
    bits = np.unpackbits(np.asarray(buf, dtype=np.uint8), bitorder="little", count=count * width)
    bits = bits.reshape(count, width).astype(np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    return (bits << shifts[None, :]).sum(axis=1, dtype=np.uint64)


def _pack_bits_py(values, width):
    n = values.shape[0]
    nbytes = (n * width + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    pos = 0
    for i in range(n):
        v = values[i]
        for b in range(width):
            if (v >> np.uint64(b)) & np.uint64(1):
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1
    return out


def _unpack_bits_py(buf, width, count):
    out = np.zeros(count, dtype=np.uint64)
    pos = 0
    for i in range(count):
        v = np.uint64(0)
        for b in range(width):
            if (buf[pos >> 3] >> (pos & 7)) & 1:
                v |= np.uint64(1) << np.uint64(b)
            pos += 1
        out[i] = v
    return out


# ----------------------------------------------------------------------
# ordered double sum over t != t' of eta_t eta_t' / |t - t'|^p
# ----------------------------------------------------------------------


def lag_double_sum_numpy(eta: np.ndarray, p: float) -> float:
    """sum_{t != t'} eta_t eta_t' |t-t'|^-p, computed lag by lag."""
    n = eta.shape[0]
    total = 0.0
    for k in range(1, n):
        total += np.dot(eta[:n - k], eta[k:]) / k ** p
    return 2.0 * total


def _lag_double_sum_py(eta, p):
    n = eta.shape[0]
    total = 0.0
    for k in range(1, n):
        acc = 0.0
        for t in range(n - k):
            acc += eta[t] * eta[t + k]
        total += acc / k ** p
    return 2.0 * total


if NUMBA_AVAILABLE:
    nearest_index_numba = njit(cache=True)(_nearest_index_py)
    _offsets_nb = njit(cache=True)(_offsets_nb)
    lattice_round_numba = njit(cache=True)(_lattice_round_py)
    pack_bits_numba = njit(cache=True)(_pack_bits_py)
    unpack_bits_numba = njit(cache=True)(_unpack_bits_py)
    lag_double_sum_numba = njit(cache=True)(_lag_double_sum_py)
else:  # pragma: no cover
    nearest_index_numba = lattice_round_numba = None
    pack_bits_numba = unpack_bits_numba = lag_double_sum_numba = None


def nearest_index(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return nearest_index_numba(points, x)
    return nearest_index_numpy(points, x)


def lattice_round(generator: np.ndarray, inverse: np.ndarray, x: np.ndarray) -> np.ndarray:
    generator = np.ascontiguousarray(generator, dtype=np.float64)
    inverse = np.ascontiguousarray(inverse, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return lattice_round_numba(generator, inverse, x)
    return lattice_round_numpy(generator, inverse, x)


def pack_bits(values: np.ndarray, width: int) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.uint64)
    if USE_NUMBA:
        return pack_bits_numba(values, int(width))
    return pack_bits_numpy(values, width)


def unpack_bits(buf: np.ndarray, width: int, count: int) -> np.ndarray:
    buf = np.ascontiguousarray(np.frombuffer(bytes(buf), dtype=np.uint8) if isinstance(buf, (bytes, bytearray, memoryview)) else buf, dtype=np.uint8)
    if USE_NUMBA:
        return unpack_bits_numba(buf, int(width), int(count))
    return unpack_bits_numpy(buf, width, count)


def lag_double_sum(eta: np.ndarray, p: float) -> float:
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    if USE_NUMBA:
        return float(lag_double_sum_numba(eta, float(p)))
    return float(lag_double_sum_numpy(eta, p))
