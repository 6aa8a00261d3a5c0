import math

import numpy as np
import pytest

from medu import _kernels
from medu.errors import ConfigError, DecodeError
from medu.lattice import (build_lattice, cell_second_moment, keyed_dithers, lattice_for_rate, lattice_from_code,
                          nearest_point, sample_dither, sdq_decode, sdq_encode)
from medu.rng import stream


def test_scalar_codebook():
    lat = build_lattice("scalar", 1.0, 2.5)
    assert sorted(lat.points.ravel().tolist()) == [-2, -1, 0, 1, 2]
    assert lat.size == 5 and lat.dim == 1
    assert lat.points[0, 0] == 0.0


def test_hexagonal_codebook_first_shell():
    lat = build_lattice("hexagonal", 1.0, 1.01)
    assert lat.size == 7 and lat.dim == 2
    norms = np.linalg.norm(lat.points, axis=1)
    assert norms[0] == 0.0
    np.testing.assert_allclose(norms[1:], 1.0)
    np.testing.assert_allclose(lat.G[:, 1], [0.5, math.sqrt(3) / 2])


def test_codebook_is_symmetric():
    for lat in (lattice_for_rate("hexagonal", 4), lattice_for_rate("scalar", 5), build_lattice("hexagonal", 0.7, 3.3)):
        pts = {tuple(np.round(p, 9)) for p in lat.points}
        assert pts == {tuple(np.round(-p, 9)) for p in lat.points}
        assert np.all(np.linalg.norm(lat.points, axis=1) < lat.gamma)


def test_small_gamma_rejected():
    with pytest.raises(ConfigError):
        build_lattice("scalar", 1.0, 1.0)
    with pytest.raises(ConfigError):
        build_lattice("scalar", 0.0, 2.0)
    with pytest.raises(ConfigError):
        build_lattice("cubic", 1.0, 3.0)


@pytest.mark.parametrize("kind,rate", [("scalar", 3), ("scalar", 6), ("hexagonal", 3), ("hexagonal", 4.5)])
def test_rate_budget(kind, rate):
    lat = lattice_for_rate(kind, rate)
    assert lat.size <= 2 ** (lat.dim * rate)
    assert lat.size > 2 ** (lat.dim * rate) / 2.5


def test_kind_code_roundtrip():
    lat = lattice_for_rate("hexagonal", 4)
    back = lattice_from_code(lat.kind_code, lat.delta, lat.gamma)
    assert np.array_equal(back.points, lat.points)
    with pytest.raises(ConfigError):
        lattice_from_code(9, 1.0, 3.0)


def test_second_moments():
    assert cell_second_moment(build_lattice("scalar", 1.0, 3.0))[0] == pytest.approx(1 / 12)
    assert cell_second_moment(build_lattice("scalar", 2.0, 5.0))[0] == pytest.approx(4 / 12)
    m, se = cell_second_moment(build_lattice("hexagonal", 1.0, 3.0))
    assert m == pytest.approx(5 / 36, rel=0.02)
    assert se > 0
    vals = [cell_second_moment(build_lattice("scalar", d, 3.0 * d))[0] for d in (1.0, 0.5, 0.1, 0.01)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_nearest_examples():
    lat = build_lattice("scalar", 1.0, 2.5)
    assert nearest_point(lat, 0.4) == (0, False)
    assert nearest_point(lat, 0.5) == (0, False)
    idx, over = nearest_point(lat, 7.3)
    assert lat.points[idx, 0] == 2.0 and over
    idx, over = nearest_point(lat, -1.5)
    assert lat.points[idx, 0] == -1.0 and not over


@pytest.mark.parametrize("lat", [build_lattice("scalar", 1.0, 6.5), lattice_for_rate("hexagonal", 4),
                                 build_lattice("hexagonal", 1.0, 3.2)])
def test_nearest_matches_exhaustive_search(lat):
    rng = np.random.default_rng(0)
    P = lat.points
    i, j, k = (rng.integers(0, len(P), 2000) for _ in range(3))
    x = np.vstack([rng.uniform(-1.3 * lat.gamma, 1.3 * lat.gamma, (5000, lat.dim)), P[i], (P[i] + P[j]) / 2,
                   (P[i] + P[j] + P[k]) / 3])
    idx, _ = lat.nearest(x)
    np.testing.assert_array_equal(idx, _kernels.nearest_index_numpy(P, x))


def test_scalar_dither_moments():
    lat = build_lattice("scalar", 1.0, 3.0)
    d = sample_dither(lat, stream(0, "mc", 1), 100_000)
    assert np.all((d >= -0.5) & (d < 0.5))
    assert abs(d.mean()) < 0.003
    assert abs(d.var() - 1 / 12) / (1 / 12) < 0.02


def test_hexagonal_dither_lies_in_voronoi_cell():
    lat = build_lattice("hexagonal", 1.0, 3.0)
    d = sample_dither(lat, stream(0, "mc", 2), 20_000)
    z = _kernels.lattice_round_numpy(lat.G, lat.G_inv, d)
    assert np.all(z == 0)
    assert np.linalg.norm(d, axis=1).max() <= lat.covering_radius + 1e-12
    assert np.linalg.norm(d.mean(axis=0)) < 0.01


def test_keyed_dither_regenerable():
    lat = lattice_for_rate("hexagonal", 4)
    a = keyed_dithers(lat, 3, 5, 2, 50)
    assert np.array_equal(a, keyed_dithers(lat, 3, 5, 2, 50))
    assert not np.array_equal(a, keyed_dithers(lat, 3, 5, 3, 50))
    # row m does not depend on how many rows were requested
    assert np.array_equal(a[:20], keyed_dithers(lat, 3, 5, 2, 20))


def test_sdq_examples():
    lat = build_lattice("scalar", 1.0, 2.5)
    for m in range(lat.size):
        idx, over = sdq_encode(lat, lat.points[m], np.zeros(1))
        assert idx[0] == m and not over[0]
    idx, _ = sdq_encode(lat, np.array([0.3]), np.array([0.3]))
    assert lat.points[idx[0], 0] == 1.0
    _, over = sdq_encode(lat, np.array([2.2]), np.array([0.45]))
    assert over[0]


def test_decode_rejects_bad_index():
    lat = build_lattice("scalar", 1.0, 2.5)
    with pytest.raises(DecodeError):
        sdq_decode(lat, np.array([5]), np.zeros(1))
    with pytest.raises(DecodeError):
        sdq_decode(lat, np.array([-1]), np.zeros(1))


@pytest.mark.parametrize("source", ["uniform", "gaussian", "bimodal"])
def test_scalar_sdq_error_statistics(source):
    lat = build_lattice("scalar", 1.0, 40.0)
    rng = np.random.default_rng(7)
    n = 100_000
    if source == "uniform":
        x = rng.uniform(-10, 10, n)
    elif source == "gaussian":
        x = rng.normal(0.3, 3.0, n)
    else:
        x = np.where(rng.random(n) < 0.5, -5.0, 5.0) + 0.05 * rng.standard_normal(n)
    d = sample_dither(lat, stream(1, "mc", 3), n)
    idx, over = sdq_encode(lat, x, d)
    assert not over.any()
    e = sdq_decode(lat, idx, d).ravel() - x
    assert abs(e.mean()) < 0.003
    assert abs(e.var() - 1 / 12) / (1 / 12) < 0.02
    assert abs(np.corrcoef(e, x)[0, 1]) < 0.01


def test_hexagonal_sdq_error_moments():
    lat = lattice_for_rate("hexagonal", 5)
    rng = np.random.default_rng(3)
    n = 100_000
    x = rng.uniform(-1, 1, (n, 2)) * lat.load_radius / math.sqrt(2)
    d = sample_dither(lat, stream(2, "mc", 4), n)
    idx, over = sdq_encode(lat, x, d)
    assert not over.any()
    e = sdq_decode(lat, idx, d) - x
    sq = (e * e).sum(axis=1)
    se = sq.std(ddof=1) / math.sqrt(n)
    assert abs(sq.mean() - lat.second_moment) < 3 * se + 3 * cell_second_moment(lat)[1]
    for j in range(2):
        assert abs(e[:, j].mean()) < 3 * e[:, j].std() / math.sqrt(n)


def test_load_radius_never_overloads():
    lat = lattice_for_rate("hexagonal", 3)
    rng = np.random.default_rng(0)
    ang = rng.uniform(0, 2 * math.pi, 50_000)
    x = lat.load_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    d = sample_dither(lat, stream(0, "mc", 5), 50_000)
    assert not sdq_encode(lat, x, d)[1].any()
