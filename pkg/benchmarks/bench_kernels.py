"""Time each hot kernel under numba and pure numpy.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 200000]

Prints one line per kernel with the best-of-N wall time of both backends
and the speedup.  The numba timing excludes the first (compiling) call.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from medu import _kernels as K
from medu.lattice import lattice_for_rate


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(size, rng):
    lat = lattice_for_rate("hexagonal", 6.0)
    x = rng.uniform(-lat.gamma, lat.gamma, size=(size, 2))
    vals = rng.integers(0, 1 << 7, size=size, dtype=np.uint64)
    packed = K.pack_bits_numpy(vals, 7)
    eta = 1.0 / (np.arange(min(size, 20000)) + 10.0)
    return [
        ("nearest_index", lambda: K.nearest_index_numpy(lat.points, x[:size // 10]),
         lambda: K.nearest_index_numba(lat.points, x[:size // 10])),
        ("lattice_round", lambda: K.lattice_round_numpy(lat.G, lat.G_inv, x),
         lambda: K.lattice_round_numba(lat.G, lat.G_inv, x)),
        ("pack_bits", lambda: K.pack_bits_numpy(vals, 7), lambda: K.pack_bits_numba(vals, 7)),
        ("unpack_bits", lambda: K.unpack_bits_numpy(packed, 7, size), lambda: K.unpack_bits_numba(packed, 7, size)),
        ("lag_double_sum", lambda: K.lag_double_sum_numpy(eta, 1.0), lambda: K.lag_double_sum_numba(eta, 1.0)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=200_000)
    args = ap.parse_args(argv)
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'numpy [s]':>11s} {'numba [s]':>11s} {'speedup':>8s}")
    for name, f_np, f_nb in cases(args.size, rng):
        f_nb()  # compile
        t_np = best_time(f_np, args.repeat)
        t_nb = best_time(f_nb, args.repeat)
        print(f"{name:16s} {t_np:11.5f} {t_nb:11.5f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
