import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from medu import _kernels as K
from medu.bounds import enumerate_sample_mean_variance, sample_mean_variance
from medu.codec import CodecConfig, MeduSink, RawSink, decode_rounds, mirror_refs
from medu.fl import FLConfig, LRSchedule, MemorySink, RoundGradients, run_fl
from medu.lattice import build_lattice, keyed_dithers
from medu.model import ModelSpec
from medu.data import Dataset
from medu.sampling import select_users
from medu.store import parse_store, serialize_store, storage_bits, storage_bound
from medu.unlearn import unlearn_full, unlearn_medu, unlearn_medu_d3

kinds = st.sampled_from(["scalar", "hexagonal"])


@st.composite
def codec_case(draw):
    U = draw(st.integers(2, 6))
    M = draw(st.integers(1, 9))
    T = draw(st.integers(0, 4))
    repl = draw(st.booleans())
    Ubar = draw(st.integers(1, 8 if repl else U))
    cfg = CodecConfig(Ubar=Ubar, replacement=repl, threshold=draw(st.sampled_from([0.0, 0.05, 0.5, 5.0])),
                      lattice_kind=draw(kinds), rate=draw(st.sampled_from([2.0, 2.5, 3.0, 4.0])),
                      seed=draw(st.integers(0, 2 ** 32)), bypass=draw(st.booleans()))
    scale = draw(st.sampled_from([1e-6, 1.0, 1e3]))
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32)))
    g = rng.standard_normal((T + 1, U, M)) * scale
    g = np.cumsum(g * 0.3, axis=0)
    return cfg, [RoundGradients(t, 0.1, np.arange(1, U + 1), g[t]) for t in range(T + 1)], U, M


def fill(cfg, rgs, U, M):
    sink = MeduSink(cfg, U, M)
    for rg in rgs:
        sink.append(rg)
    return sink


@given(codec_case())
def test_store_roundtrip(case):
    cfg, rgs, U, M = case
    store = fill(cfg, rgs, U, M).store
    assert parse_store(serialize_store(store)) == store


@given(codec_case())
def test_encoder_mirror_equals_decoder(case):
    cfg, rgs, U, M = case
    sink = fill(cfg, rgs, U, M)
    refs = mirror_refs(sink.store, len(rgs))
    assert set(refs) == set(sink.state.refs)
    for u, g in refs.items():
        assert np.array_equal(g, sink.state.refs[u].reshape(-1)[:M])


@given(codec_case())
def test_storage_within_guarantee(case):
    cfg, rgs, U, M = case
    if cfg.bypass or M % cfg.L:
        return
    store = fill(cfg, rgs, U, M).store
    lat = cfg.lattice()
    ideal, packed = storage_bits(store)
    assert ideal <= storage_bound(U, cfg.Ubar, len(rgs) - 1, M, lat.dim, lat.size) * (1 + 1e-12)
    assert packed >= ideal


@given(codec_case())
def test_d3_form_equivalent(case):
    cfg, rgs, U, M = case
    store = fill(cfg, rgs, U, M).store
    etas = np.full(len(rgs), 0.1)
    for user in range(1, U + 1):
        a = unlearn_medu(np.zeros(M), store, user, etas)
        b = unlearn_medu_d3(np.zeros(M), store, user, etas)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10 * (1 + np.abs(a).max()))


@given(st.integers(2, 6), st.integers(1, 9), st.integers(0, 5), st.integers(0, 1000), kinds)
def test_lossless_matches_full(U, M, T, seed, kind):
    rng = np.random.default_rng(seed)
    raw, medu = RawSink(U, M), MeduSink(CodecConfig(Ubar=U, bypass=True, lattice_kind=kind), U, M)
    for t in range(T + 1):
        rg = RoundGradients(t, 0.1, np.arange(1, U + 1), rng.standard_normal((U, M)))
        raw.append(rg)
        medu.append(rg)
    etas = rng.uniform(0.01, 1.0, T + 1)
    for user in range(1, U + 1):
        a = unlearn_full(np.ones(M), raw.store, user, etas)
        b = unlearn_medu(np.ones(M), medu.store, user, etas)
        assert np.linalg.norm(a - b) <= 1e-9 * (1 + np.linalg.norm(a))
    for dr, rec in zip(decode_rounds(medu.store), raw.store.rounds):
        assert np.array_equal(dr.grads, rec.grads)


@given(kinds, st.floats(0.1, 3.0), st.floats(1.05, 8.0))
def test_codebook_symmetric_and_canonical(kind, delta, ratio):
    try:
        lat = build_lattice(kind, delta, delta * ratio)
    except Exception:
        return
    key = lambda p: tuple(np.round(p, 9))  # noqa: E731
    assert {key(p) for p in lat.points} == {key(-p) for p in lat.points}
    norms = np.linalg.norm(lat.points, axis=1)
    assert np.all(np.diff(np.round(norms, 9)) >= 0)
    assert lat.points[0].tolist() == [0.0] * lat.dim


@given(kinds, st.integers(0, 10 ** 6), st.integers(1, 400))
def test_nearest_matches_brute_force(kind, seed, n):
    lat = build_lattice(kind, 1.0, 4.3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-6, 6, (n, lat.dim))
    if seed % 2:
        x = np.round(x * 2) / 2  # many exact ties
    idx, _ = lat.nearest(x)
    np.testing.assert_array_equal(idx, K.nearest_index_numpy(lat.points, x))


@given(st.integers(0, 1000), st.integers(0, 50), st.integers(1, 9), st.integers(1, 40), st.integers(1, 40))
def test_dither_prefix_stable(seed, t, user, n1, n2):
    lat = build_lattice("hexagonal", 1.0, 3.0)
    a = keyed_dithers(lat, seed, t, user, n1)
    b = keyed_dithers(lat, seed, t, user, n2)
    m = min(n1, n2)
    assert np.array_equal(a[:m], b[:m])


@given(st.integers(1, 63), st.lists(st.integers(0, 2 ** 62), max_size=60))
def test_bit_packing_roundtrip(width, values):
    vals = np.array([v % (1 << width) for v in values], dtype=np.uint64)
    packed = K.pack_bits(vals, width)
    assert packed.size == -(-vals.size * width // 8)
    np.testing.assert_array_equal(K.unpack_bits(packed, width, vals.size), vals)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.data())
def test_sample_mean_formula(pop, data):
    N = len(pop)
    n = data.draw(st.integers(1, N))
    for repl in (False, True):
        exact = enumerate_sample_mean_variance(pop, n, repl)
        assert abs(sample_mean_variance(N, n, float(np.var(pop)), repl) - exact) <= 1e-12 * max(1.0, exact) + 1e-12


@given(st.integers(2, 30), st.integers(0, 10 ** 6), st.booleans(), st.data())
def test_selection_contract(U, seed, repl, data):
    Ubar = data.draw(st.integers(1, 2 * U if repl else U))
    t = data.draw(st.integers(0, 1000))
    s = select_users(U, Ubar, t, seed, repl)
    assert s.size == Ubar and s.min() >= 1 and s.max() <= U
    if not repl:
        assert len(set(s.tolist())) == Ubar
    assert np.array_equal(s, select_users(U, Ubar, t, seed, repl))


@given(st.integers(2, 4), st.integers(0, 4), st.integers(0, 1000), st.sampled_from(["constant", "decaying"]))
def test_telescoping(U, T, seed, kind):
    spec = ModelSpec("logistic", (2, 2))
    rng = np.random.default_rng(seed)
    clients = [Dataset(rng.standard_normal((6, 2)), rng.integers(0, 2, 6)) for _ in range(U)]
    sink = MemorySink()
    res = run_fl(FLConfig(U, T, spec, LRSchedule(kind, c=0.2, a=1.0, b0=3.0), batch_size=4, seed=seed),
                 clients, [sink])
    closed = res.w0 - sum(rg.eta * rg.grads.mean(axis=0) for rg in sink.rounds)
    np.testing.assert_allclose(closed, res.w_final, rtol=1e-9, atol=1e-12)
