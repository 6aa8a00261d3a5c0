"""Closed-form deviation and variance bounds, their inputs, and numeric oracles.

All double sums run over ordered pairs (t, t') with t != t' in 0..T.
Learning rates enter as an array ``etas`` of length T+1 or as a
schedule callable together with ``T``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from . import _kernels
from .errors import ConfigError

# ----------------------------------------------------------------------
# constants
# ----------------------------------------------------------------------


@dataclass
class BoundConstants:
    """Inputs of the bound evaluators.

    ``delta`` is the per-round threshold, a scalar or an array over
    rounds; ``sigma2`` is the second moment of the quantization error of
    one stored sub-vector (including any scaling the codec applies).
    """

    G2: float
    A: float = 0.0
    nu: float = 1.0
    alpha: float = 1.0
    B: float = 0.0
    beta: float = 2.0
    C: float = 0.0
    zeta: float = 2.0
    delta: object = 0.0
    sigma2: float = 0.0
    S: float = 0.0
    U: int = 2
    Ubar: int = 2
    M: int = 1
    L: int = 1
    source: str = "declared"
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beta <= 1 or self.zeta <= 1:
            raise ConfigError(f"correlation decay exponents must exceed 1 (beta={self.beta}, zeta={self.zeta})")
        if self.alpha <= 0 or self.nu <= 0:
            raise ConfigError(f"gradient decay needs alpha > 0 and nu > 0 (alpha={self.alpha}, nu={self.nu})")
        for name in ("G2", "A", "B", "C", "sigma2", "S"):
            if getattr(self, name) < 0:
                raise ConfigError(f"constant {name} must be >= 0")
        if self.U < 2:
            raise ConfigError("bounds need U >= 2")
        if self.source not in ("declared", "empirical"):
            raise ConfigError(f"unknown constants source {self.source!r}")

    def deltas(self, n_rounds: int) -> np.ndarray:
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim == 0:
            return np.full(n_rounds, float(d))
        if d.shape != (n_rounds,):
            raise ConfigError(f"threshold schedule has {d.size} entries for {n_rounds} rounds")
        return d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delta"] = np.asarray(self.delta).tolist()
        return out


def s_factor(U: int, Ubar: int, replacement: bool) -> float:
    """Sampling factor of the stored-user average."""
    if Ubar < 2:
        raise ConfigError(f"sampling factor undefined for fewer than 2 stored users (Ubar={Ubar})")
    if replacement:
        return 1.0 / (Ubar - 1)
    if U < 3:
        raise ConfigError(f"sampling factor without replacement needs U >= 3 (U={U})")
    return (1.0 / (Ubar - 1)) * (U - Ubar) / (U - 2)


# ----------------------------------------------------------------------
# sums
# ----------------------------------------------------------------------


def _eta_array(schedule, T=None) -> np.ndarray:
    if callable(schedule):
        if T is None:
            raise ConfigError("a schedule callable needs T")
        return np.array([schedule(t) for t in range(T + 1)], dtype=np.float64)
    etas = np.asarray(schedule, dtype=np.float64)
    if T is not None and etas.shape != (T + 1,):
        raise ConfigError(f"expected {T + 1} learning rates, got {etas.size}")
    return etas


def lag_sum(etas, p: float) -> float:
    """sum over t != t' of eta_t eta_t' / |t - t'|^p."""
    return _kernels.lag_double_sum(np.asarray(etas, dtype=np.float64), p)


def decaying_etas(T: int, a: float, b0: float) -> np.ndarray:
    return a / (np.arange(T + 1, dtype=np.float64) + b0)


def partial_double_sum(T: int, p: float, a: float, b0: float) -> float:
    """Ordered double sum for eta_t = a/(t+b0), t, t' in 0..T."""
    if T < 1:
        raise ConfigError("partial double sum needs T >= 1")
    return lag_sum(decaying_etas(T, a, b0), p)


def double_sum_increments(T_max: int, p: float, a: float, b0: float) -> np.ndarray:
    """partial(T) - partial(T-1) for T = 1..T_max (entry T-1).

    inc(T) = 2 eta_T sum_{k=1..T} eta_{T-k} k^-p, evaluated for every T at
    once as a convolution through the FFT.
    """
    etas = decaying_etas(T_max, a, b0)
    kern = np.zeros(T_max + 1)
    kern[1:] = np.arange(1, T_max + 1, dtype=np.float64) ** (-p)
    n = 1 << int(math.ceil(math.log2(2 * (T_max + 1))))
    conv = np.fft.irfft(np.fft.rfft(etas, n) * np.fft.rfft(kern, n), n)[:T_max + 1]
    return 2.0 * etas[1:] * conv[1:]


def double_sum_majorant(T: int, p: float, a: float, b0: float) -> float:
    """Upper bound on the double sum obtained by shifting the indices to start
    at 1, bounding 1/(t t') by 1/t² and extending the lag sum to T.

    Finite as T grows iff p > 1.
    """
    t = np.arange(1, T + 1, dtype=np.float64)
    return a * a * (2.0 / b0 * np.sum(t ** (-1.0 - p)) + 2.0 * np.sum(t ** -2.0) * np.sum(t ** (-p)))


def _tail_exponent(Ts, vals) -> float:
    """Slope of -log(vals) against log(Ts) over the last decade."""
    Ts = np.asarray(Ts, dtype=np.float64)
    vals = np.asarray(vals, dtype=np.float64)
    keep = Ts >= Ts[-1] / 10.0
    slope = np.polyfit(np.log(Ts[keep]), np.log(vals[keep]), 1)[0]
    return float(-slope)


def divergence_probe(p: float, a: float = 1.0, b0: float = 1.0, T_max: int = 100_000, tol: float = 0.05) -> dict:
    """Decide whether partial sums keep growing as T -> infinity.

    A positive series whose terms decay like T^-q converges iff q > 1.
    The exponent q is fitted on the last decade of increments, both for
    the exact double sum and for its majorant.
    """
    inc = double_sum_increments(T_max, p, a, b0)
    Ts = np.unique(np.geomspace(10, T_max, 60).astype(np.int64))
    q_exact = _tail_exponent(Ts, inc[Ts - 1])
    t = np.arange(1, T_max + 1, dtype=np.float64)
    s2 = np.cumsum(t ** -2.0)
    sp = np.cumsum(t ** -p)
    majorant = a * a * (2.0 / b0 * np.cumsum(t ** (-1.0 - p)) + 2.0 * s2 * sp)
    q_major = _tail_exponent(Ts, np.diff(majorant)[Ts - 2])
    partial = np.cumsum(inc)
    return {
        "p": p, "a": a, "b0": b0, "T_max": T_max,
        "partial_at_T_max": float(partial[-1]),
        "increment_at_T_max": float(inc[-1]),
        "monotone": bool(np.all(inc > 0)),
        "tail_exponent": q_exact,
        "verdict": "diverges" if q_exact <= 1.0 + tol else "converges",
        "majorant_at_T_max": float(majorant[-1]),
        "majorant_tail_exponent": q_major,
        "majorant_verdict": "diverges" if q_major <= 1.0 + tol else "converges",
    }


# ----------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------


def var_bound_medu(k: BoundConstants, schedule, T=None) -> float:
    """Bound on E‖w'' - w'‖² for rounds 0..T."""
    etas = _eta_array(schedule, T)
    eta2 = etas * etas
    d2 = k.deltas(etas.size) ** 2
    sampling = 2.0 * k.S * (k.G2 * eta2.sum() + k.B * lag_sum(etas, k.beta))
    quant = (k.S + 1.0 / (k.U - 1)) * (4.0 * k.M / k.L) * (
        float(np.sum(eta2 * (d2 + k.sigma2))) + k.C * lag_sum(etas, k.zeta))
    return float(sampling + quant)


def a_term(k: BoundConstants, etas: np.ndarray, form: str = "pairwise") -> float:
    """Cross-round full-gradient term.

    ``pairwise``: sum_{t != t'} eta_t eta_t' / ((t+nu)^alpha (t'+nu)^alpha).
    ``literal``: the same with an extra eta_t factor in each summand.
    """
    t = np.arange(etas.size, dtype=np.float64)
    c = 1.0 / (t + k.nu) ** k.alpha
    a = etas * c
    if form == "pairwise":
        return float(a.sum() ** 2 - np.sum(a * a))
    if form == "literal":
        b = etas * a
        return float(b.sum() * a.sum() - np.sum(b * a))
    raise ConfigError(f"unknown form {form!r}")


def mii_bound_fu(k: BoundConstants, schedule, T=None, form: str = "pairwise") -> float:
    """Bound on E‖w* - w'‖² for rounds 0..T."""
    etas = _eta_array(schedule, T)
    return float(4.0 * k.G2 * np.sum(etas * etas) + 4.0 * k.A ** 2 * a_term(k, etas, form)
                 + 4.0 * k.B / (k.U - 1) * lag_sum(etas, k.beta))


def mii_bound_medu(k: BoundConstants, schedule, T=None, form: str = "pairwise") -> float:
    """Bound on E‖w* - w''‖²: the uncompressed bound plus the compression variance bound."""
    return mii_bound_fu(k, schedule, T, form) + var_bound_medu(k, schedule, T)


# ----------------------------------------------------------------------
# sample mean
# ----------------------------------------------------------------------


def sample_mean_variance(N: int, n: int, sigma2: float, replacement: bool) -> float:
    """Variance of the mean of n draws from a population of N values with
    population variance sigma2 (divisor N)."""
    if n < 1 or N < 1:
        raise ConfigError("sample and population sizes must be positive")
    if replacement:
        return sigma2 / n
    if n > N:
        raise ConfigError(f"cannot draw {n} distinct values from {N}")
    if N == 1:
        return 0.0
    return (sigma2 / n) * (N - n) / (N - 1)


def enumerate_sample_mean_variance(population, n: int, replacement: bool) -> float:
    """Exact variance of the sample mean by listing every equally likely sample."""
    pop = np.asarray(population, dtype=np.float64)
    if replacement:
        samples = itertools.product(pop, repeat=n)
    else:
        samples = itertools.combinations(pop, n)
    means = np.array([np.mean(s) for s in samples])
    return float(np.mean((means - pop.mean()) ** 2))


# ----------------------------------------------------------------------
# empirical constants
# ----------------------------------------------------------------------


@dataclass
class ConstantSamples:
    """Per-seed observations used to fit the bound constants.

    fl_grads    (R, T+1, U, M) stochastic gradients along the federated runs
    rt_grads    (R, T+1, U, M) along the retraining runs, NaN rows for the
                excluded user; optional
    full_norm   (R, T+1, U) norms of full local gradients at the global
                models of both runs (the larger of the two); optional.  The
                cross-user term of the uncompressed bound multiplies two such
                norms, so the decay constants are fitted on norms.
    thresh_err  (R, T+1, U, n_sub, L) thresholding errors; optional
    """

    fl_grads: np.ndarray
    rt_grads: np.ndarray | None = None
    full_norm: np.ndarray | None = None
    thresh_err: np.ndarray | None = None


def _z(n_tests: int, level: float) -> float:
    return NormalDist().inv_cdf(1.0 - level / (2.0 * max(1, n_tests)))


def _lag_envelopes(x: np.ndarray, y: np.ndarray, level: float):
    """Upper and lower CI envelopes of |E<x_t, y_t'>| per lag.

    x, y have shape (R, T+1, U, D).  For every user and ordered pair
    t != t' the seed mean of the inner product gets a Bonferroni-corrected
    normal interval; the envelope at lag k is the largest upper (lower)
    end over pairs at that lag.
    """
    R, n_t = x.shape[0], x.shape[1]
    prods = np.einsum("rtud,rsud->rtsu", x, y)
    with warnings.catch_warnings():
        # rows of an excluded user are NaN in every seed
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(prods, axis=0)
        se = np.nanstd(prods, axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(mean)
    valid = ~np.isnan(mean)
    z = _z(int(valid.sum()), level)
    upper = np.abs(mean) + z * se
    lower = np.maximum(np.abs(mean) - z * se, 0.0)
    up = np.zeros(n_t - 1)
    lo = np.zeros(n_t - 1)
    for t in range(n_t):
        for s in range(n_t):
            if t == s:
                continue
            k = abs(t - s) - 1
            v = valid[t, s]
            if v.any():
                up[k] = max(up[k], float(np.max(upper[t, s][v])))
                lo[k] = max(lo[k], float(np.max(lower[t, s][v])))
    return up, lo


def fit_power_envelope(env: np.ndarray, min_exponent: float = 1.0 + 1e-3):
    """(scale, exponent) with env[k-1] <= scale / k^exponent for every lag k.

    The exponent is the least-squares slope of log env against log k over
    the positive entries, raised to ``min_exponent`` when smaller; the
    scale is then the smallest value that dominates every lag.
    """
    lags = np.arange(1, env.size + 1, dtype=np.float64)
    pos = env > 0
    if not pos.any():
        return 0.0, max(min_exponent, 2.0), 0.0
    if pos.sum() >= 2:
        slope, icpt = np.polyfit(np.log(lags[pos]), np.log(env[pos]), 1)
        resid = float(np.sqrt(np.mean((np.log(env[pos]) - (icpt + slope * np.log(lags[pos]))) ** 2)))
        expo = max(-slope, min_exponent)
    else:
        expo, resid = min_exponent, 0.0
    scale = float(np.max(env * lags ** expo))
    return scale, float(expo), resid


_NU_GRID = np.unique(np.concatenate([np.geomspace(1e-3, 1e3, 601), np.arange(1.0, 51.0)]))


def fit_decay(values: np.ndarray):
    """Fit y_t <= A / (t + nu)^alpha to a positive sequence y_0..y_T.

    nu is chosen on a grid by the residual of a log-linear least-squares
    fit; A is then raised until the curve dominates every point.
    Returns (A, nu, alpha, rms residual in log space).
    """
    y = np.asarray(values, dtype=np.float64)
    t = np.arange(y.size, dtype=np.float64)
    keep = y > 0
    if keep.sum() < 2:
        return float(y.max(initial=0.0)), 1.0, 1.0, 0.0
    ly = np.log(y[keep])
    best = None
    for nu in _NU_GRID:
        lx = np.log(t[keep] + nu)
        slope, icpt = np.polyfit(lx, ly, 1)
        alpha = -slope
        if alpha <= 0:
            continue
        res = float(np.sqrt(np.mean((ly - icpt - slope * lx) ** 2)))
        if best is None or res < best[0] - 1e-12:
            best = (res, nu, alpha)
    if best is None:
        # nondecreasing sequence: no decay to fit, use a nearly flat envelope
        nu, alpha = 1.0, 1e-3
        res = float("nan")
    else:
        res, nu, alpha = best
    A = float(np.max(y * (t + nu) ** alpha))
    return A, float(nu), float(alpha), res


def estimate_constants(samples: ConstantSamples, *, U: int, Ubar: int, M: int, L: int, replacement: bool,
                       delta=0.0, sigma2: float = 0.0, level: float = 0.05) -> BoundConstants:
    """Fit every bound constant from observed histories.

    Envelope constants (B, C) use upper confidence limits, so the fitted
    bound is meant to sit above the truth with probability about 1-level.
    """
    g = np.asarray(samples.fl_grads, dtype=np.float64)
    if g.ndim != 4:
        raise ConfigError("fl_grads must have shape (seeds, rounds, users, M)")
    T = g.shape[1] - 1
    if T < 4:
        raise ConfigError(f"need at least 5 rounds (T >= 4) to fit decay constants, got T={T}")
    fit = {}
    norms = np.einsum("rtum,rtum->rtu", g, g)
    G2 = float(np.max(norms))
    if samples.rt_grads is not None:
        r = np.asarray(samples.rt_grads, dtype=np.float64)
        G2 = max(G2, float(np.nanmax(np.einsum("rtum,rtum->rtu", r, r))))

    ups, los = [], []
    up, lo = _lag_envelopes(g, g, level)
    ups.append(up)
    los.append(lo)
    if samples.rt_grads is not None:
        for x, y in ((r, r), (r, g)):
            up, lo = _lag_envelopes(x, y, level)
            ups.append(up)
            los.append(lo)
    B, beta, res_b = fit_power_envelope(np.max(ups, axis=0))
    B_lo = fit_power_envelope(np.max(los, axis=0), beta)[0]
    fit["B"] = {"envelope": np.max(ups, axis=0).tolist(), "ci": [B_lo, B], "log_residual": res_b}

    C, zeta = 0.0, 2.0
    if samples.thresh_err is not None:
        e = np.asarray(samples.thresh_err, dtype=np.float64)
        R, n_t, n_u, n_sub, LL = e.shape
        # the correlation condition is per sub-vector index; treat (u, m) pairs as units
        flat = e.reshape(R, n_t, n_u * n_sub, LL)
        up, lo = _lag_envelopes(flat, flat, level)
        C, zeta, res_c = fit_power_envelope(up)
        fit["C"] = {"envelope": up.tolist(), "ci": [fit_power_envelope(lo, zeta)[0], C], "log_residual": res_c}

    A, nu, alpha = 0.0, 1.0, 1.0
    if samples.full_norm is not None:
        fs = np.asarray(samples.full_norm, dtype=np.float64)
        env = np.max(fs.reshape(fs.shape[0], fs.shape[1], -1), axis=(0, 2))
        A, nu, alpha, res_a = fit_decay(env)
        fit["A"] = {"envelope": env.tolist(), "log_residual": res_a}

    S = s_factor(U, Ubar, replacement) if Ubar >= 2 else 0.0
    return BoundConstants(G2=G2, A=A, nu=nu, alpha=alpha, B=B, beta=beta, C=C, zeta=zeta, delta=delta,
                          sigma2=sigma2, S=S, U=U, Ubar=Ubar, M=M, L=L, source="empirical", fit=fit)


def stores_to_samples(raw_stores, retrain_stores=None, exclude=None) -> ConstantSamples:
    """Stack raw-mode histories of several seeds into :class:`ConstantSamples`.

    ``retrain_stores`` hold the retraining runs' gradients as raw stores
    with the row of ``exclude`` set to NaN.
    """
    fl = np.stack([np.stack([r.grads for r in s.rounds]) for s in raw_stores])
    rt = None
    if retrain_stores is not None:
        rt = np.stack([np.stack([r.grads for r in s.rounds]) for s in retrain_stores])
    return ConstantSamples(fl, rt)


def estimate_constants_from_stores(raw_stores, retrain_stores=None, **kw) -> BoundConstants:
    s = stores_to_samples(raw_stores, retrain_stores)
    h = raw_stores[0].header
    kw.setdefault("U", h.U)
    kw.setdefault("M", h.M)
    return estimate_constants(s, **kw)
