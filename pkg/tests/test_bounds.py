import numpy as np
import pytest

from medu.bounds import (BoundConstants, ConstantSamples, a_term, decaying_etas, divergence_probe,
                         double_sum_increments, double_sum_majorant, enumerate_sample_mean_variance,
                         estimate_constants, fit_decay, fit_power_envelope, lag_sum, mii_bound_fu, mii_bound_medu,
                         partial_double_sum, s_factor, sample_mean_variance, var_bound_medu)
from medu.errors import ConfigError


def brute_lag_sum(etas, p):
    n = len(etas)
    return sum(etas[t] * etas[s] / abs(t - s) ** p for t in range(n) for s in range(n) if t != s)


def test_s_factor():
    assert s_factor(25, 10, True) == pytest.approx(1 / 9)
    assert s_factor(25, 10, False) == pytest.approx((1 / 9) * (15 / 23))
    assert s_factor(25, 10, False) == pytest.approx(0.072464, abs=1e-6)
    assert s_factor(7, 7, False) == 0.0
    with pytest.raises(ConfigError):
        s_factor(25, 1, False)


def test_var_bound_single_round():
    k = BoundConstants(G2=1.0, S=1 / 9, U=25, M=8, L=2, sigma2=1 / 12)
    expect = 2 * (1 / 9) * 0.01 + (1 / 9 + 1 / 24) * 16 * 0.01 * (1 / 12)
    assert var_bound_medu(k, [0.1]) == pytest.approx(expect, rel=1e-12)
    assert var_bound_medu(k, [0.1]) == pytest.approx(0.0042593, abs=1e-7)


def test_var_bound_quantization_free():
    etas = decaying_etas(9, 1.0, 10.0)
    k = BoundConstants(G2=2.5, S=0.2, U=10, M=6, L=2, B=0.0)
    assert var_bound_medu(k, etas) == pytest.approx(2 * 0.2 * 2.5 * np.sum(etas ** 2), rel=1e-12)


def test_fu_bound_examples():
    k = BoundConstants(G2=1.0, A=3.0, B=2.0, U=25)
    assert mii_bound_fu(k, [0.1]) == pytest.approx(0.04, rel=1e-12)
    etas = decaying_etas(7, 1.0, 5.0)
    k0 = BoundConstants(G2=1.3, U=4)
    assert mii_bound_fu(k0, etas) == pytest.approx(4 * 1.3 * np.sum(etas ** 2), rel=1e-12)


def test_medu_bound_composition():
    k = BoundConstants(G2=1.0, S=1 / 9, U=25, M=8, L=2, sigma2=1 / 12)
    assert mii_bound_medu(k, [0.1]) == pytest.approx(0.0442593, abs=1e-7)
    etas = decaying_etas(5, 1.0, 3.0)
    free = BoundConstants(G2=0.7, A=0.4, B=0.1, U=6, Ubar=6, M=4, L=2, S=s_factor(6, 6, False))
    assert mii_bound_medu(free, etas) == pytest.approx(mii_bound_fu(free, etas), rel=1e-12)


def test_bound_accepts_schedule_callable():
    k = BoundConstants(G2=1.0, U=3)
    sched = lambda t: 1.0 / (t + 2.0)  # noqa: E731
    assert mii_bound_fu(k, sched, T=4) == pytest.approx(mii_bound_fu(k, [sched(t) for t in range(5)]))
    with pytest.raises(ConfigError):
        mii_bound_fu(k, sched)


def test_a_term_forms():
    k = BoundConstants(G2=1.0, A=1.0, nu=2.0, alpha=1.5, U=3)
    etas = decaying_etas(6, 1.0, 4.0)
    c = 1.0 / (np.arange(7) + 2.0) ** 1.5
    pair = sum(etas[t] * etas[s] * c[t] * c[s] for t in range(7) for s in range(7) if t != s)
    lit = sum(etas[t] ** 2 * etas[s] * c[t] * c[s] for t in range(7) for s in range(7) if t != s)
    assert a_term(k, etas) == pytest.approx(pair, rel=1e-12)
    assert a_term(k, etas, "literal") == pytest.approx(lit, rel=1e-12)


def test_constants_validation():
    with pytest.raises(ConfigError):
        BoundConstants(G2=1.0, beta=1.0)
    with pytest.raises(ConfigError):
        BoundConstants(G2=-1.0)
    with pytest.raises(ConfigError):
        BoundConstants(G2=1.0, delta=[0.1, 0.2]).deltas(3)


# ----------------------------------------------------------------------
# sample mean
# ----------------------------------------------------------------------


def test_sample_mean_examples():
    pop = [1.0, 2.0, 3.0]
    assert sample_mean_variance(3, 2, 2 / 3, False) == pytest.approx(1 / 6)
    assert enumerate_sample_mean_variance(pop, 2, False) == pytest.approx(1 / 6)
    assert sample_mean_variance(3, 2, 2 / 3, True) == pytest.approx(1 / 3)
    assert enumerate_sample_mean_variance(pop, 2, True) == pytest.approx(1 / 3)
    assert sample_mean_variance(5, 5, 3.0, False) == 0.0
    with pytest.raises(ConfigError):
        sample_mean_variance(3, 4, 1.0, False)


def test_sample_mean_exhaustive():
    rng = np.random.default_rng(0)
    for N in range(1, 7):
        pop = rng.standard_normal(N)
        for n in range(1, N + 1):
            for repl in (False, True):
                exact = enumerate_sample_mean_variance(pop, n, repl)
                assert abs(sample_mean_variance(N, n, float(np.var(pop)), repl) - exact) <= 1e-12


# ----------------------------------------------------------------------
# double sums
# ----------------------------------------------------------------------


def test_partial_double_sum_examples():
    assert partial_double_sum(3, 2.0, 1.0, 1.0) == pytest.approx(1.78472, abs=1e-5)
    etas = decaying_etas(3, 1.0, 1.0)
    assert partial_double_sum(3, 2.0, 1.0, 1.0) == pytest.approx(brute_lag_sum(etas, 2.0), rel=1e-12)
    assert partial_double_sum(1, 1.5, 2.0, 3.0) == pytest.approx(2 * (2 / 3) * (2 / 4))
    with pytest.raises(ConfigError):
        partial_double_sum(0, 2.0, 1.0, 1.0)


@pytest.mark.parametrize("p", [0.5, 1.0, 2.0])
def test_lag_sum_matches_brute_force(p):
    etas = np.random.default_rng(1).uniform(0.01, 1.0, 23)
    assert lag_sum(etas, p) == pytest.approx(brute_lag_sum(etas, p), rel=1e-12)


def test_increments_match_differences():
    inc = double_sum_increments(40, 1.5, 1.0, 2.0)
    partial = [partial_double_sum(T, 1.5, 1.0, 2.0) for T in range(1, 41)]
    np.testing.assert_allclose(inc[1:], np.diff(partial), rtol=1e-9)
    assert inc[0] == pytest.approx(partial[0], rel=1e-9)


def test_increments_vanish_for_p2():
    inc = double_sum_increments(100_000, 2.0, 1.0, 1.0)
    assert np.all(inc > 0)
    assert inc[-1] < 1e-8
    assert np.all(np.diff(inc[1000:]) < 0)


def test_majorant_dominates():
    for p in (0.5, 1.0, 1.5, 2.0):
        for T in (5, 50, 500):
            assert double_sum_majorant(T, p, 1.0, 1.0) >= partial_double_sum(T, p, 1.0, 1.0)


def test_probe_verdicts():
    for p in (1.5, 2.0):
        r = divergence_probe(p, T_max=100_000)
        assert r["verdict"] == "converges" and r["majorant_verdict"] == "converges" and r["monotone"]
    r = divergence_probe(0.5, T_max=100_000)
    assert r["majorant_verdict"] == "diverges"


# ----------------------------------------------------------------------
# constant fitting
# ----------------------------------------------------------------------


def test_fit_decay_synthetic():
    t = np.arange(60)
    A, nu, alpha, _ = fit_decay(1.0 / (t + 1.0))
    assert alpha == pytest.approx(1.0, rel=0.1)
    assert A == pytest.approx(1.0, rel=0.1)
    assert np.all(1.0 / (t + 1.0) <= A / (t + nu) ** alpha * (1 + 1e-12))


def test_power_envelope_dominates():
    env = np.array([1.0, 0.3, 0.2, 0.05, 0.04])
    scale, expo, _ = fit_power_envelope(env)
    assert expo > 1
    lags = np.arange(1, 6)
    assert np.all(env <= scale / lags ** expo * (1 + 1e-12))
    assert fit_power_envelope(np.zeros(4))[0] == 0.0


def test_estimate_constant_gradients():
    c = np.array([1.0, -2.0, 0.5])
    g = np.broadcast_to(c, (3, 6, 4, 3)).copy()
    k = estimate_constants(ConstantSamples(g), U=4, Ubar=2, M=3, L=1, replacement=False)
    assert k.G2 == pytest.approx(float(c @ c))
    assert k.source == "empirical"


def test_estimate_needs_rounds():
    with pytest.raises(ConfigError):
        estimate_constants(ConstantSamples(np.zeros((2, 4, 3, 2))), U=3, Ubar=2, M=2, L=1, replacement=False)


def test_iid_gradients_have_no_correlation():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((400, 8, 3, 2))
    k = estimate_constants(ConstantSamples(g), U=3, Ubar=2, M=2, L=1, replacement=False)
    lo, hi = k.fit["B"]["ci"]
    assert lo == 0.0 <= hi


def test_decay_fit_from_full_norms():
    T, U = 20, 3
    norms = np.broadcast_to(np.sqrt(1.0 / (np.arange(T + 1) + 1.0))[None, :, None], (2, T + 1, U))
    g = np.zeros((2, T + 1, U, 2))
    k = estimate_constants(ConstantSamples(g, full_norm=norms), U=U, Ubar=2, M=2, L=1, replacement=False)
    assert k.alpha == pytest.approx(0.5, rel=0.1)
    assert k.A == pytest.approx(1.0, rel=0.1)

