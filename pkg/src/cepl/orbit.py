"""Quadratic family T_a(x) = a x (1 - x): orbits and their derivatives."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _dd
from .errors import DegenerateDerivative, DomainError, NoSignChange, NotMisiurewicz

C = 0.5
LAMBDA = 4.0
# |T^n_{a1}(x) - T^n_{a2}(x)| <= LIP_C * LAMBDA^n * |a1 - a2| with LIP_C = sum_j 4^{-j}
LIP_C = 4.0 / 3.0

# orbit depth above which extended precision is always used
EXTENDED_DEPTH = 200
# distance to c below which standard precision is promoted to extended
EXTENDED_NEAR_C = 1e-12


@dataclass(frozen=True)
class MapParams:
    """Parameter of the quadratic map, with its critical point and derivative bound."""

    a: float
    c: float = C
    Lambda: float = LAMBDA

    def __post_init__(self):
        if not (2.0 < self.a <= 4.0):
            raise DomainError(f"a must lie in (2, 4], got {self.a}")
        if self.c != C or self.Lambda != LAMBDA:
            raise DomainError("c and Lambda are fixed at 1/2 and 4")

    def T(self, x):
        return self.a * x * (1.0 - x)

    def dT(self, x):
        return self.a * (1.0 - 2.0 * x)


@dataclass(frozen=True)
class PrecisionConfig:
    """Arithmetic mode: "standard" (double) or "extended" (double-double)."""

    mode: str = "standard"
    comparison_slack: float = 0.0

    def __post_init__(self):
        if self.mode not in ("standard", "extended"):
            raise DomainError(f"unknown precision mode {self.mode!r}")
        if not (0.0 <= self.comparison_slack <= 1e-6):
            raise DomainError("comparison_slack must lie in [0, 1e-6]")


@dataclass(frozen=True)
class OrbitTrace:
    """Critical orbit x_j = T_a^{j+1}(c), j = 0..depth, with derivative data.

    ``log_deriv[j]`` is log|(T_a^j)'(x_0)| and ``signs[j]`` its sign, so entry 0
    is (0, +1).  ``param_deriv[j]`` is dx_j/da.  ``critical_hits`` lists the j
    where x_j equals c within the comparison slack; derivative products through
    such a point vanish and their log entries are -inf.
    """

    a: float
    depth: int
    points: np.ndarray
    log_deriv: np.ndarray
    signs: np.ndarray
    param_deriv: np.ndarray
    critical_hits: tuple = ()
    mode: str = "standard"
    dist_c: np.ndarray = field(default=None, repr=False)

    def to_json(self):
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else str(v)

        return json.dumps({
            "a": self.a,
            "depth": self.depth,
            "points": [num(v) for v in self.points],
            "log_deriv": [num(v) for v in self.log_deriv],
            "signs": [int(s) for s in self.signs],
            "param_deriv": [num(v) for v in self.param_deriv],
        })


def _check_a(a, low=0.0):
    if not (low < a <= 4.0):
        raise DomainError(f"a must lie in ({low}, 4], got {a}")


def iterate(a, x0, n):
    """Return the orbit [x0, T_a x0, ..., T_a^n x0] as a float array."""
    _check_a(a)
    if not (0.0 <= x0 <= 1.0):
        raise DomainError(f"x0 must lie in [0, 1], got {x0}")
    if n < 0:
        raise DomainError("n must be nonnegative")
    out = np.empty(n + 1)
    x = float(x0)
    for k in range(n + 1):
        out[k] = x
        x = a * x * (1.0 - x)
    return out


def _param_deriv(a, points):
    # x'_{j+1} = x_j (1 - x_j) + a (1 - 2 x_j) x'_j,  x'_0 = 1/4
    d = np.empty_like(points)
    d[0] = 0.25
    for j in range(len(points) - 1):
        x = points[j]
        d[j + 1] = x * (1.0 - x) + a * (1.0 - 2.0 * x) * d[j]
    return d


def critical_orbit(a, n, precision=None):
    """Critical orbit of T_a to depth n with log-space derivative products.

    Standard precision is promoted to extended when n exceeds 200 or the orbit
    comes within 1e-12 of c.
    """
    precision = precision or PrecisionConfig()
    _check_a(a)
    if n < 0:
        raise DomainError("n must be nonnegative")
    mode = precision.mode
    if mode == "standard" and n > EXTENDED_DEPTH:
        mode = "extended"
    if mode == "standard":
        x, logd, sgn, _ = _dd.critical_orbit_f64(float(a), n)
        dist = x - C
        near = np.abs(dist) < EXTENDED_NEAR_C
        if near.any() and not (np.abs(dist) <= precision.comparison_slack).any():
            mode = "extended"
    if mode == "extended":
        xh, _, dist, logd, sgn, _ = _dd.critical_orbit_dd(float(a), 0.0, n)
        x = xh
    hits = tuple(int(j) for j in np.nonzero(np.abs(dist) <= precision.comparison_slack)[0])
    return OrbitTrace(a=float(a), depth=n, points=x, log_deriv=logd, signs=sgn,
                      param_deriv=_param_deriv(float(a), x), critical_hits=hits,
                      mode=mode, dist_c=dist)


def transversality_ratio(a, n, precision=None):
    """Ratios x'_j(a) / (T_a^j)'(c_1(a)) for j = 1..n.

    Accumulated as z_j = z_{j-1} + x_{j-1}(1 - x_{j-1}) / (T^j)'(x_0) with the
    inverse derivative taken from its log magnitude and sign, so nothing
    overflows.
    """
    precision = precision or PrecisionConfig()
    _check_a(a)
    _, _, dist, _, _, z = _dd.critical_orbit_dd(float(a), 0.0, n)
    bad = np.nonzero(np.abs(dist[:n]) <= precision.comparison_slack)[0]
    if bad.size:
        raise DegenerateDerivative(f"T'_a vanishes at x_{bad[0]} (a={a})")
    return z[1:n + 1].copy()


def orbit_point(a, x, n):
    """T_a^n(x) in extended precision, rounded to a float."""
    h, lo = _dd.iterate_dd(float(a), float(x), n)
    return h[n] + lo[n]


def parameter_lipschitz_check(a1, a2, x, n, slack=1e-12):
    """Compare |T_{a1}^n(x) - T_{a2}^n(x)| with (4/3) 4^n |a1 - a2|."""
    _check_a(a1, 2.0)
    _check_a(a2, 2.0)
    if not (0.0 <= x <= 1.0) or n < 1:
        raise DomainError("need x in [0, 1] and n >= 1")
    h1, l1 = _dd.iterate_dd(float(a1), float(x), n)
    h2, l2 = _dd.iterate_dd(float(a2), float(x), n)
    lhs = abs((h1[n] - h2[n]) + (l1[n] - l2[n]))
    rhs = LIP_C * LAMBDA ** n * abs(a1 - a2)
    return lhs, rhs, lhs <= rhs + slack


def _fixed_point(a, branch):
    if branch == "positive":
        return 1.0 - 1.0 / a
    if branch == "zero":
        return 0.0
    raise DomainError(f"unknown branch {branch!r}")


def misiurewicz_residual(a, k, branch="positive"):
    """g(a) = x_k(a) - p(a), with p the chosen fixed point of T_a."""
    h, lo = _dd.batch_point(float(a), np.zeros(1), k)
    p = _fixed_point(a, branch)
    return (h[0] - p) + lo[0]


def find_misiurewicz(k=2, bracket=(3.6, 3.7), tol=1e-13, branch="positive",
                     probe=10_000, floor=1e-6):
    """Parameter where the critical orbit lands on a fixed point at step k + 1.

    Bisection on g(a) = x_k(a) - p(a) down to adjacent floats.  The critical
    orbit is then followed for ``probe`` steps; once it has landed on p (within
    1e3 * tol) it is pinned there, since a double-double orbit drifts off the
    repelling fixed point after a few hundred steps.  Raises NotMisiurewicz if
    the orbit comes within ``floor`` of c.

    Returns (a_star, min_distance).
    """
    lo, hi = map(float, bracket)
    if not (0.0 < lo < hi <= 4.0):
        raise DomainError(f"bad bracket {bracket}")
    glo = misiurewicz_residual(lo, k, branch)
    ghi = misiurewicz_residual(hi, k, branch)
    if glo == 0.0:
        root = lo
    elif ghi == 0.0:
        root = hi
    elif np.sign(glo) == np.sign(ghi):
        raise NoSignChange(f"g has the same sign at both ends of {bracket}")
    else:
        while True:
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            gm = misiurewicz_residual(mid, k, branch)
            if gm == 0.0:
                lo = hi = mid
                break
            if np.sign(gm) == np.sign(glo):
                lo, glo = mid, gm
            else:
                hi, ghi = mid, gm
        root = lo if abs(misiurewicz_residual(lo, k, branch)) <= abs(
            misiurewicz_residual(hi, k, branch)) else hi
    g = misiurewicz_residual(root, k, branch)
    if abs(g) >= tol:
        raise NoSignChange(f"bisection ended with |g| = {abs(g):.3e} >= tol")
    p = _fixed_point(root, branch)
    h, lw = 0.5, 0.0
    ah = root
    closest = math.inf
    landed = False
    for j in range(1, probe + 1):
        if landed:
            h, lw = p, 0.0
        else:
            h, lw = _dd.dd_step(ah, 0.0, h, lw)
            if j >= k + 1 and abs((h - p) + lw) < 1e3 * tol:
                landed = True
                h, lw = p, 0.0
        closest = min(closest, abs((h - C) + lw))
        if closest < floor:
            raise NotMisiurewicz(
                f"critical orbit of a={root!r} reaches distance {closest:.3e} from c at step {j}")
    return root, closest
