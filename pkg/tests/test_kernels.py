import os
import subprocess
import sys

import numpy as np
import pytest

from medu import _kernels as K
from medu.lattice import lattice_for_rate

needs_numba = pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("kind,rate", [("scalar", 4), ("hexagonal", 3), ("hexagonal", 5)])
def test_nearest_and_round_agree(kind, rate):
    lat = lattice_for_rate(kind, rate)
    x = np.random.default_rng(0).uniform(-1.2 * lat.gamma, 1.2 * lat.gamma, (3000, lat.dim))
    np.testing.assert_array_equal(K.nearest_index_numpy(lat.points, x), K.nearest_index_numba(lat.points, x))
    np.testing.assert_array_equal(K.lattice_round_numpy(lat.G, lat.G_inv, x),
                                  K.lattice_round_numba(lat.G, lat.G_inv, x))


@needs_numba
@pytest.mark.parametrize("width", [1, 3, 7, 8, 13, 63])
def test_bit_packing_agrees(width):
    rng = np.random.default_rng(width)
    vals = rng.integers(0, 2 ** min(width, 62), 257, dtype=np.uint64)
    a = K.pack_bits_numpy(vals, width)
    np.testing.assert_array_equal(a, K.pack_bits_numba(vals, width))
    np.testing.assert_array_equal(K.unpack_bits_numpy(a, width, 257), vals)
    np.testing.assert_array_equal(K.unpack_bits_numba(a, width, 257), vals)
    assert a.size == -(-257 * width // 8)


@needs_numba
@pytest.mark.parametrize("p", [0.5, 1.0, 2.0])
def test_lag_sum_agrees(p):
    eta = 1.0 / (np.arange(500) + 3.0)
    assert K.lag_double_sum_numba(eta, p) == pytest.approx(K.lag_double_sum_numpy(eta, p), rel=1e-12)


SCRIPT = """
import hashlib, sys
import numpy as np
from medu import _kernels
from medu.codec import CodecConfig, MeduSink
from medu.fl import RoundGradients
rng = np.random.default_rng(0)
sink = MeduSink(CodecConfig(Ubar=3, threshold=0.2, rate=4, seed=1), 5, 21)
g = rng.standard_normal((5, 21))
for t in range(6):
    g = g + 0.3 * rng.standard_normal((5, 21))
    sink.append(RoundGradients(t, 0.1, np.arange(1, 6), g.copy()))
print(_kernels.BACKEND, hashlib.sha256(sink.store.to_bytes()).hexdigest())
"""


def _run(env_value):
    env = dict(os.environ)
    env.pop("MEDU_DISABLE_NUMBA", None)
    if env_value is not None:
        env["MEDU_DISABLE_NUMBA"] = env_value
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


@needs_numba
def test_backends_write_identical_stores():
    numba_backend, numba_hash = _run(None)
    numpy_backend, numpy_hash = _run("1")
    assert numba_backend == "numba" and numpy_backend == "numpy"
    assert numba_hash == numpy_hash
