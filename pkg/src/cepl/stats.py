"""Invariant-measure statistics from Birkhoff averages along critical orbits."""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _dd
from .errors import (DegenerateVariance, DomainError, InsufficientSpread,
                     NonDecayingCorrelations, SuspectedPeriodicity)
from .orbit import C

# ------------------------------------------------------------------ observables

KINDS = ("x", "x2", "cos", "cusp", "tabulated", "constant")


@dataclass(frozen=True)
class Observable:
    """Hoelder observable on [0, 1].

    kinds: "x", "x2", "cos" (cos 2 pi x), "cusp" (|x - q|^exponent),
    "tabulated" (piecewise linear through ``values`` on a uniform grid) and
    "constant".
    """

    kind: str = "x"
    q: float = 0.5
    exponent: float = 1.0
    value: float = 0.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown observable kind {self.kind!r}")
        if self.kind == "cusp" and not (0 < self.exponent <= 1):
            raise DomainError("cusp exponent must lie in (0, 1]")
        if self.kind == "tabulated" and len(self.values) < 2:
            raise DomainError("tabulated observable needs at least two values")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "x":
            return x.copy()
        if k == "x2":
            return x * x
        if k == "cos":
            return np.cos(2 * np.pi * x)
        if k == "cusp":
            return np.abs(x - self.q) ** self.exponent
        if k == "tabulated":
            grid = np.linspace(0.0, 1.0, len(self.values))
            return np.interp(x, grid, np.asarray(self.values, dtype=float))
        return np.full_like(x, self.value)

    @property
    def holder_exponent(self):
        return self.exponent if self.kind == "cusp" else 1.0

    @property
    def holder_constant(self):
        k = self.kind
        if k == "x":
            return 1.0
        if k == "x2":
            return 2.0
        if k == "cos":
            return 2 * np.pi
        if k == "cusp":
            return 1.0
        if k == "tabulated":
            v = np.asarray(self.values, dtype=float)
            return float(np.max(np.abs(np.diff(v))) * (len(v) - 1))
        return 0.0

    @property
    def sup(self):
        """sup |phi| over [0, 1]."""
        x = np.linspace(0, 1, 4097)
        extra = [self.q] if self.kind == "cusp" else []
        return float(np.max(np.abs(self(np.concatenate([x, extra])))))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "cusp":
            d.update(q=self.q, exponent=self.exponent)
        elif self.kind == "constant":
            d["value"] = self.value
        elif self.kind == "tabulated":
            d["values"] = list(self.values)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "x")
        if "values" in d:
            d["values"] = tuple(d["values"])
        allowed = {"q", "exponent", "value", "values"}
        bad = set(d) - allowed
        if bad:
            raise DomainError(f"unknown observable fields {sorted(bad)}")
        return cls(kind=kind, **d)


@dataclass(frozen=True)
class Coboundary:
    """psi - psi o T_a, for checking that coboundaries have zero variance."""

    psi: Observable
    a: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.psi(x) - self.psi(self.a * x * (1 - x))


# ------------------------------------------------------------------ orbits

@njit(cache=True, nogil=True)
def _orbit(a, x0, n, restarts):
    """n points of the orbit of x0 under T_a; escapes to {0, 1} are re-seeded."""
    out = np.empty(n)
    x = x0
    k = 0
    for i in range(n):
        x = a * x * (1.0 - x)
        if x <= 0.0 or x >= 1.0 or not np.isfinite(x):
            x = restarts[k % restarts.shape[0]]
            k += 1
        out[i] = x
    return out


def _rng(seed, index=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def critical_orbit_sample(a, n, burn_in, seed, index=0):
    """Post-burn-in orbit of c + (seeded jitter of size 1e-9) under T_a.

    The jitter moves the start off preperiodic critical orbits (a = 4 sends c to
    the fixed point 0 in two steps) without changing the typical statistics.
    """
    if not (0 < a <= 4):
        raise DomainError(f"a must lie in (0, 4], got {a}")
    rng = _rng(seed, index)
    x0 = C + rng.uniform(-1e-9, 1e-9)
    restarts = rng.uniform(0.01, 0.99, size=64)
    return _orbit(float(a), x0, int(burn_in) + int(n), restarts)[int(burn_in):]


# ------------------------------------------------------------------ acim

@dataclass
class AcimEstimate:
    a: float
    histogram: np.ndarray
    bins: int
    orbit_length: int
    burn_in: int
    support: tuple
    edges: np.ndarray = field(repr=False, default=None)
    mass_outside_support: float = 0.0

    def integrate(self, phi):
        """Integral of phi against the histogram density (midpoint rule per bin)."""
        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        return float(np.sum(phi(centers) * self.histogram * np.diff(self.edges)))


def estimate_acim(a, orbit_length=10**6, burn_in=10**4, bins=200, seed=0, index=0, orbit=None):
    """Histogram density of the critical orbit of T_a on [0, 1]."""
    if orbit_length < 10**5 and orbit is None:
        raise DomainError("orbit_length must be at least 1e5")
    x = critical_orbit_sample(a, orbit_length, burn_in, seed, index) if orbit is None else orbit
    counts, edges = np.histogram(x, bins=bins, range=(0.0, 1.0))
    if np.count_nonzero(counts) < bins / 10:
        raise SuspectedPeriodicity(
            f"orbit at a={a} occupies {np.count_nonzero(counts)} of {bins} bins")
    width = np.diff(edges)
    dens = counts / (counts.sum() * width)
    c1 = a / 4
    c2 = a * c1 * (1 - c1)
    outside = float(np.mean((x < c2 - 1e-12) | (x > c1 + 1e-12)))
    return AcimEstimate(a=float(a), histogram=dens, bins=bins, orbit_length=len(x),
                        burn_in=burn_in, support=(c2, c1), edges=edges,
                        mass_outside_support=outside)


def chebyshev_density(x):
    """Invariant density of T_4: 1 / (pi sqrt(x (1 - x)))."""
    return 1.0 / (np.pi * np.sqrt(x * (1 - x)))


def chebyshev_bin_masses(edges):
    """Exact T_4-invariant mass of each bin, from the CDF (2/pi) arcsin(sqrt(x))."""
    F = 2.0 / np.pi * np.arcsin(np.sqrt(np.asarray(edges)))
    return np.diff(F)


# ------------------------------------------------------------------ variance

@dataclass
class VarianceEstimate:
    a: float
    sigma2: float
    k_max: int
    correlations: np.ndarray
    tail_bound: float
    rho_fit: float
    stderr: float = math.nan
    flag: str = ""
    mean: float = math.nan


def autocorrelations(v, k_max):
    """C_i = time average of v_t v_{t+i} for a centered series, i = 0..k_max."""
    n = len(v)
    return np.array([np.dot(v[: n - i], v[i:]) / (n - i) for i in range(k_max + 1)])


def geometric_rate(corr, n):
    """Geometric decay rate of |corr[1:]| from a log-linear fit.

    Uses the leading run of lags above the noise floor 3 C_0 / sqrt(n).
    Returns (rho, slope_stderr, r2, flag).
    """
    c0 = abs(corr[0])
    if c0 == 0:
        return 0.0, 0.0, math.nan, "constant"
    floor = 3.0 * c0 / math.sqrt(n)
    a = np.abs(corr[1:])
    run = 0
    while run < len(a) and a[run] > floor:
        run += 1
    if run < 2:
        return min(floor / c0, 0.999), math.nan, math.nan, "noise_floor"
    lags = np.arange(1, run + 1, dtype=float)
    y = np.log(a[:run])
    A = np.vstack([lags, np.ones_like(lags)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope = coef[0]
    yhat = A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1 - np.sum((y - yhat) ** 2) / ss if ss > 0 else 1.0
    if run > 2:
        s2 = np.sum((y - yhat) ** 2) / (run - 2)
        se = math.sqrt(s2 / np.sum((lags - lags.mean()) ** 2))
    else:
        se = math.nan
    if slope >= 0:
        raise NonDecayingCorrelations(f"correlation fit slope {slope:.3g} >= 0")
    return float(math.exp(slope)), se, float(r2), ""


def variance(a, phi, k_max=30, orbit_length=10**6, seed=0, burn_in=10**4, index=0,
             batches=20, orbit=None, method="truncated", block=20000):
    """Asymptotic variance of Birkhoff sums of phi under T_a.

    method="truncated": sigma^2 = C_0 + 2 sum_{i=1}^{k_max} C_i, with the tail
    bounded by 2 |C_{k_max}| rho / (1 - rho).
    method="batch": Var(S_L) / L over non-overlapping blocks of length
    ``block``.  Needed when correlations alternate in sign and decay slowly
    (parameters near a band-merging point), where the truncated sum is off by a
    large factor.  C_0..C_{k_max}, rho and tail_bound are reported either way.
    """
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    if method not in ("truncated", "batch"):
        raise DomainError(f"unknown variance method {method!r}")
    x = critical_orbit_sample(a, orbit_length, burn_in, seed, index) if orbit is None else orbit
    v = phi(x)
    mean = float(np.mean(v))
    v = v - mean
    if not np.any(v):
        return VarianceEstimate(float(a), 0.0, k_max, np.zeros(k_max + 1), 0.0, 0.0, 0.0,
                                "constant", mean)
    corr = autocorrelations(v, k_max)
    rho, _, _, flag = geometric_rate(corr, len(v))
    tail = 2 * abs(corr[k_max]) * rho / (1 - rho)
    if method == "truncated":
        s2 = float(corr[0] + 2 * corr[1:].sum())
        # batch-means standard error of the truncated sum
        per = []
        for chunk in np.array_split(v, batches):
            w = chunk - chunk.mean()
            cc = autocorrelations(w, k_max)
            per.append(cc[0] + 2 * cc[1:].sum())
        se = float(np.std(per, ddof=1) / math.sqrt(batches))
    else:
        nb = len(v) // block
        if nb < 10:
            raise DomainError(f"orbit too short for {block}-step blocks")
        sums = v[: nb * block].reshape(nb, block).sum(axis=1)
        s2 = float(np.mean(sums ** 2) / block)
        se = s2 * math.sqrt(2.0 / (nb - 1))
    if s2 < 0:
        warnings.warn(f"negative variance estimate {s2:.3g} at a={a}; clamped to 0")
        s2 = 0.0
    return VarianceEstimate(float(a), s2, k_max, corr, float(tail), float(rho), se, flag, mean)


# ------------------------------------------------------------------ normalization

@dataclass(frozen=True)
class NormalizedObservable:
    """phi_a = (phi - mean) / sigma."""

    base: Observable
    a: float
    mean: float
    sigma: float

    def __call__(self, x):
        return (self.base(x) - self.mean) / self.sigma

    @property
    def sup(self):
        return (self.base.sup + abs(self.mean)) / self.sigma


def normalize(phi, a, est, acim=None, sigma_floor=1e-6):
    """Center phi with its acim mean and scale by sigma_a(phi)."""
    if not est.sigma2 > sigma_floor:
        raise DegenerateVariance(f"sigma^2 = {est.sigma2:.3g} <= floor {sigma_floor} at a={a}")
    mean = acim.integrate(phi) if acim is not None else est.mean
    return NormalizedObservable(phi, float(a), float(mean), math.sqrt(est.sigma2))


def xi(a, n, nphi):
    """phi_a evaluated at x_n(a) = T_a^{n+1}(c), orbit in extended precision."""
    h, lo = _dd.batch_point(float(a), np.zeros(1), int(n))
    return float(nphi(np.array([h[0] + lo[0]]))[0])


@dataclass
class NormalizationTable:
    """Means and sigmas on a parameter grid, linearly interpolated in between."""

    base: Observable
    grid: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    estimates: list = field(default_factory=list, repr=False)

    def mean_sigma(self, a):
        a = np.asarray(a, dtype=float)
        return np.interp(a, self.grid, self.means), np.interp(a, self.grid, self.sigmas)

    def at(self, a):
        m, s = self.mean_sigma(a)
        return NormalizedObservable(self.base, float(a), float(m), float(s))

    def apply(self, a, x):
        """phi_a(x) for arrays of parameters and phase points."""
        m, s = self.mean_sigma(a)
        return (self.base(x) - m) / s


def _per_param(args):
    a, phi, k_max, orbit_length, burn_in, seed, index, bins, method, block = args
    x = critical_orbit_sample(a, orbit_length, burn_in, seed, index)
    est = variance(a, phi, k_max, orbit=x, method=method, block=block)
    acim = estimate_acim(a, burn_in=burn_in, bins=bins, seed=seed, index=index, orbit=x)
    return est, acim


def parameter_map(fn, items, threads=1):
    """Apply fn to items, possibly on a thread pool; results keep input order."""
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def normalization_table(phi, grid, k_max=30, orbit_length=10**6, burn_in=10**4, seed=0,
                        sigma_floor=1e-6, bins=2000, threads=1, method="batch", block=20000):
    """Estimate mean and sigma of phi at each grid parameter."""
    grid = np.asarray(sorted(grid), dtype=float)
    items = [(a, phi, k_max, orbit_length, burn_in, seed, i, bins, method, block)
             for i, a in enumerate(grid)]
    res = parameter_map(_per_param, items, threads)
    means, sigmas = [], []
    for (est, acim) in res:
        n = normalize(phi, est.a, est, acim, sigma_floor)
        means.append(n.mean)
        sigmas.append(n.sigma)
    return NormalizationTable(phi, grid, np.array(means), np.array(sigmas), [r[0] for r in res])


def restriction_halfwidth(epsilon, table, a_star, sigma_floor=1e-6, max_halvings=30):
    """Largest eps / 2^m whose window around a_star has all sampled sigma^2 above the floor."""
    eps = float(epsilon)
    for _ in range(max_halvings + 1):
        mask = np.abs(table.grid - a_star) <= eps
        if not mask.any() or np.all(table.sigmas[mask] ** 2 > sigma_floor):
            return eps
        eps /= 2
    return eps


# ------------------------------------------------------------------ fits

@dataclass
class HolderFit:
    exponent: float
    constant: float
    r2: float
    pairs: list = field(default_factory=list, repr=False)


def _pairwise_fit(params, values):
    params = np.asarray(params, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(params) < 20:
        raise InsufficientSpread(f"need at least 20 parameters, got {len(params)}")
    i, j = np.triu_indices(len(params), 1)
    da = np.abs(params[i] - params[j])
    dv = np.abs(values[i] - values[j])
    keep = (da > 0) & (dv > 0)
    if keep.sum() < 3:
        raise InsufficientSpread("parameter differences or responses all vanish")
    if da[keep].max() / da[keep].min() < 100:
        raise InsufficientSpread("pairwise distances span fewer than two decades")
    x, y = np.log(da[keep]), np.log(dv[keep])
    slope, intercept = np.polyfit(x, y, 1)
    yhat = slope * x + intercept
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1 - np.sum((y - yhat) ** 2) / ss if ss > 0 else 1.0
    pairs = list(zip(params[i], params[j], values[i] - values[j]))
    return HolderFit(float(slope), float(math.exp(intercept)), float(r2), pairs)


def birkhoff_stats(params, phi, k_max=30, orbit_length=10**6, burn_in=10**4, seed=0, threads=1,
                   method="truncated", block=20000):
    """(mean, sigma) of phi at each parameter."""
    def one(args):
        i, a = args
        x = critical_orbit_sample(a, orbit_length, burn_in, seed, i)
        est = variance(a, phi, k_max, orbit=x, method=method, block=block)
        return est.mean, math.sqrt(est.sigma2)
    res = parameter_map(one, list(enumerate(params)), threads)
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def response_holder_fit(params, phi, means=None, **kw):
    """Log-log fit of |int phi d mu_a - int phi d mu_a'| against |a - a'|."""
    if len(params) < 20:
        raise InsufficientSpread(f"need at least 20 parameters, got {len(params)}")
    if means is None:
        means, _ = birkhoff_stats(params, phi, **kw)
    return _pairwise_fit(params, means)


def sigma_holder_fit(params, phi, sigmas=None, **kw):
    """Log-log fit of |sigma_a(phi) - sigma_a'(phi)| against |a - a'|."""
    if len(params) < 20:
        raise InsufficientSpread(f"need at least 20 parameters, got {len(params)}")
    if sigmas is None:
        _, sigmas = birkhoff_stats(params, phi, **kw)
    return _pairwise_fit(params, sigmas)


@dataclass
class DecorrelationFit:
    rho: float
    band: tuple
    r2: float
    correlations: np.ndarray
    flag: str = ""


def decorrelation_fit(a, phi, psi, n_max=30, orbit_length=10**6, burn_in=10**4, seed=0):
    """Geometric rate of C_n(phi, psi) = int phi~ . psi~ o T^n d mu_a."""
    if n_max < 10:
        raise DomainError("n_max must be >= 10")
    x = critical_orbit_sample(a, orbit_length, burn_in, seed)
    u = phi(x)
    v = psi(x)
    u = u - u.mean()
    v = v - v.mean()
    n = len(x)
    corr = np.array([np.dot(u[: n - k], v[k:]) / (n - k) for k in range(n_max + 1)])
    if not np.any(u) or not np.any(v):
        return DecorrelationFit(0.0, (0.0, 0.0), math.nan, corr, "constant")
    scale = math.sqrt(np.mean(u * u) * np.mean(v * v))
    c = corr.copy()
    c[0] = scale
    rho, se, r2, flag = geometric_rate(c, n)
    if math.isnan(se):
        band = (rho, rho)
    else:
        band = (rho * math.exp(-1.96 * se), min(rho * math.exp(1.96 * se), 1.0))
    return DecorrelationFit(rho, band, r2, corr, flag)
