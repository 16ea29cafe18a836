"""Inductive parameter exclusion around a Misiurewicz parameter.

Parameters are stored as offsets from ``a_star`` so that ``a = a_star + delta``
is exact in double-double; all orbit evaluation happens in double-double.
Levels 0..N0 hold the root interval only; from level N0 + 1 on every interval
is checked for a free return at time j (x_{j-1} hitting U_{r0}), essential
returns are subdivided in phase space and pulled back, deep hosts are
discarded, and the growth / recurrence conditions are verified at sample
parameters.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import _dd
from .errors import AtCritical, ConfigError, EmptyPartition, MonotonicityViolation, RootTooWide
from .orbit import C, LAMBDA

A_STAR = 3.6785735104283224

ACTIVE = "active"
SPLIT = "split"
EXCLUDED_RECURRENCE = "excluded_recurrence"
EXCLUDED_FA = "excluded_fa"
EXCLUDED_CONDITION = "excluded_condition"
EXCLUDED = (EXCLUDED_RECURRENCE, EXCLUDED_FA, EXCLUDED_CONDITION)


@dataclass(frozen=True)
class ConstructionConfig:
    a_star: float = A_STAR
    epsilon: float = 1e-4
    r0: int = 8
    kappa0: float = 9.0
    kappa1: float = 10.0
    alpha_bc: float = 0.03
    beta_bc: float = 0.1
    lambda_ce: float = 1.5
    N0: int = 15
    d0: float = 1.0
    d1: float = 0.34
    max_depth: int = 40
    samples_per_interval: int = 5
    exclusion: str = "polynomial"
    fa_tau: float = None
    p_max: int = 200
    N1: int = None
    # allowance for the spread of log|(T^n)'| across one interval when
    # deciding that a whole block of deep host cells fails the growth check
    ce_merge_factor: float = 10.0

    def __post_init__(self):
        checks = [
            (self.epsilon > 0, "epsilon > 0"),
            (self.r0 >= 2, "r0 >= 2"),
            (self.kappa0 > 1, "kappa0 > 1"),
            (self.kappa1 > self.kappa0, "kappa1 > kappa0"),
            (self.alpha_bc > 0, "alpha_bc > 0"),
            (self.beta_bc > self.alpha_bc, "beta_bc > alpha_bc"),
            (1 < self.lambda_ce < LAMBDA, "1 < lambda_ce < 4"),
            (self.N0 >= 1, "N0 >= 1"),
            (self.d0 > 0, "d0 > 0"),
            (0 < self.d1 < 1, "0 < d1 < 1"),
            (self.d1 * self.kappa0 >= 3, "d1 * kappa0 >= 3"),
            (self.max_depth >= 0, "max_depth >= 0"),
            (self.samples_per_interval >= 3, "samples_per_interval >= 3"),
            (self.exclusion in ("polynomial", "exponential"), "exclusion in {polynomial, exponential}"),
            (self.fa_tau is None or 0 < self.fa_tau < 1, "0 < fa_tau < 1"),
            (2.0 < self.a_star + self.epsilon <= 4.0 and self.a_star - self.epsilon > 2.0,
             "root interval inside (2, 4]"),
            (self.ce_merge_factor >= 1, "ce_merge_factor >= 1"),
        ]
        for ok, name in checks:
            if not ok:
                raise ConfigError(f"construction config violates invariant: {name}")

    @property
    def n1(self):
        return self.N0 if self.N1 is None else self.N1


@dataclass(frozen=True)
class HostIndex:
    """Host cell I_{r,ell} on side "plus"/"minus", or an outside piece.

    Outside pieces carry r = r0 - 1 and ell = their index within the return.
    """

    r: int
    ell: int
    side: str

    @property
    def outside(self):
        return self.side == "outside"

    def to_dict(self):
        return {"r": self.r, "ell": self.ell, "side": self.side}


@dataclass(frozen=True)
class ReturnEvent:
    time: int
    kind: str
    host: HostIndex
    binding_length: int = 0

    def to_dict(self):
        return {"time": self.time, "kind": self.kind, "r": self.host.r,
                "ell": self.host.ell, "side": self.host.side, "p": self.binding_length}


@dataclass(eq=False)
class ParamInterval:
    """Parameter interval [a_star + lo, a_star + hi] with its return history.

    ``born`` is the level that created it; ``ended`` is the level at which it
    was split or excluded (None while active).  ``bound_until`` is the last
    time that is not free.
    """

    lo: float
    hi: float
    a0: float
    born: int
    host_at_birth: HostIndex
    history: tuple = ()
    bound_until: int = 0
    status: str = ACTIVE
    ended: int = None
    reason: str = ""
    uid: int = -1
    parent: int = -1
    ce_margin: float = math.nan
    recurrence_margin: float = math.nan

    @property
    def left(self):
        return self.a0 + self.lo

    @property
    def right(self):
        return self.a0 + self.hi

    @property
    def length(self):
        return self.hi - self.lo

    @property
    def level(self):
        return self.born

    def samples(self, k):
        t = np.linspace(0.0, 1.0, k)
        s = self.lo + (self.hi - self.lo) * t
        s[0], s[-1] = self.lo, self.hi
        return s

    def to_dict(self):
        return {
            "level": self.born,
            "ended": self.ended,
            "uid": self.uid,
            "parent": self.parent,
            "left": self.left,
            "right": self.right,
            "lo": self.lo,
            "hi": self.hi,
            "status": self.status,
            "reason": self.reason,
            "host": self.host_at_birth.to_dict(),
            "returns": [e.to_dict() for e in self.history],
            "bound_until": self.bound_until,
            "ce_margin": self.ce_margin,
            "recurrence_margin": self.recurrence_margin,
        }


@dataclass
class PartitionLevel:
    level: int
    intervals: list
    retained_measure: float
    excluded_this_level: float
    e_j: float
    excluded: list = field(default_factory=list)


# ---------------------------------------------------------------- host cells

def cell_width(r):
    return (math.exp(-r) - math.exp(-r - 1)) / (r * r)


def cell_bounds(r, ell, side):
    """Phase-space bounds [lo, hi) of I_{r,ell} on the given side (ell counts from c)."""
    inner = math.exp(-r - 1)
    w = cell_width(r)
    if side == "plus":
        return C + inner + ell * w, C + inner + (ell + 1) * w
    return C - inner - (ell + 1) * w, C - inner - ell * w


def host_interval(x, r0, slack=0.0):
    """Host cell of the phase point x, or the outside sentinel."""
    d = x - C
    if abs(d) <= slack:
        raise AtCritical(f"x = {x!r} is the critical point")
    if abs(d) >= math.exp(-r0):
        return HostIndex(r0 - 1, 0, "outside")
    ad = abs(d)
    r = int(math.floor(-math.log(ad)))
    # guard the floor against rounding at cell edges
    while ad >= math.exp(-r):
        r -= 1
    while ad < math.exp(-r - 1):
        r += 1
    ell = int((ad - math.exp(-r - 1)) // cell_width(r))
    ell = min(max(ell, 0), r * r - 1)
    return HostIndex(r, ell, "plus" if d > 0 else "minus")


def exclusion_rule(host, j, kappa0, mode="polynomial", alpha_bc=None):
    """True if a host met at an essential return at time j must be discarded."""
    if host.outside:
        return False
    return host.r >= discard_depth(j, kappa0, mode, alpha_bc)


def discard_depth(j, kappa0, mode="polynomial", alpha_bc=None):
    """Threshold t such that hosts with r >= t are discarded at time j (float)."""
    if mode == "polynomial":
        return kappa0 * math.log(j - 1) if j > 1 else -math.inf
    return alpha_bc * (j - 1)


def tail_sums(s, jmax, nmax=10**6):
    """e_j = sum_{n >= j} n^{-s} for j = 0..jmax (e_0 := e_1).

    Partial sum up to nmax plus the midpoint integral estimate of the rest.
    """
    n = np.arange(1, nmax + 1, dtype=float)
    terms = n ** (-s)
    rev = np.cumsum(terms[::-1])[::-1]
    tail = (nmax + 0.5) ** (1.0 - s) / (s - 1.0)
    out = np.empty(jmax + 1)
    for j in range(jmax + 1):
        jj = max(j, 1)
        out[j] = (rev[jj - 1] if jj <= nmax else 0.0) + tail
    return out


# --------------------------------------------------------------- orbit helpers

def image(a0, deltas, k):
    """x_k at the given offsets as floats (double-double rounded)."""
    h, l = _dd.batch_point(a0, np.ascontiguousarray(deltas, dtype=float), k)
    return h + l


def binding_time(a, r, nu, beta_bc, p_max, a0=None):
    """Binding time of U_r with T_a^nu(c); ``a`` may be split as a0 + a."""
    if a0 is None:
        a0, a = float(a), 0.0
    out = _dd.batch_binding(float(a0), np.array([float(a)]), np.array([int(r)]),
                            np.array([int(nu)]), float(beta_bc), int(p_max), LAMBDA)
    return int(out[0])


def _first_return(cfg, upto):
    ends = np.array([-cfg.epsilon, cfg.epsilon])
    u = math.exp(-cfg.r0)
    for j in range(1, upto + 1):
        y = image(cfg.a_star, ends, j - 1)
        lo, hi = y.min(), y.max()
        if hi > C - u and lo < C + u:
            return j
    return None


def classify_return(interval, j, cfg, y=None):
    """Return event for time j from the endpoint images of x_{j-1}, or None."""
    if y is None:
        y = image(interval.a0, np.array([interval.lo, interval.hi]), j - 1)
    y0, y1 = float(min(y)), float(max(y))
    u = math.exp(-cfg.r0)
    if y1 <= C - u or y0 >= C + u:
        return None
    host = _shallowest_host(y0, y1, cfg.r0)
    if j <= interval.bound_until:
        return ReturnEvent(j, "bound", host)
    if contains_full_cell(y0, y1, cfg.r0):
        return ReturnEvent(j, "essential", host)
    return ReturnEvent(j, "inessential", host)


def _shallowest_host(y0, y1, r0):
    # binding is computed for the largest cell the image meets
    u = math.exp(-r0)
    if y0 <= C - u:
        return HostIndex(r0, r0 * r0 - 1, "minus")
    if y1 >= C + u:
        return HostIndex(r0, r0 * r0 - 1, "plus")
    hosts = [host_interval(p, r0) for p in (y0, y1) if p != C]
    if not hosts:
        return HostIndex(r0, 0, "plus")
    return min(hosts, key=lambda h: h.r)


def _lower_edge(r, ell):
    return math.exp(-r - 1) + ell * cell_width(r)


def _full_cell_in(da, db, r0):
    """Is there a cell [e, e + w) with da <= e and e + w <= db (distances from c)?"""
    u = math.exp(-r0)
    if db >= u:
        below = (r0, r0 * r0 - 1)
    else:
        h = host_interval(C + db, r0)
        edge_r, edge_ell = h.r, h.ell
        if edge_ell >= 1:
            below = (edge_r, edge_ell - 1)
        else:
            below = (edge_r + 1, (edge_r + 1) ** 2 - 1)
    return _lower_edge(*below) >= da


def contains_full_cell(y0, y1, r0):
    """Does [y0, y1] contain some full I_{r,ell} with r >= r0?"""
    if y0 <= C <= y1:
        return True
    if y0 > C:
        return _full_cell_in(y0 - C, y1 - C, r0)
    return _full_cell_in(C - y1, C - y0, r0)


# ----------------------------------------------------------------- subdivision

@dataclass
class _Atom:
    y0: float
    y1: float
    kind: str  # outside, cell, core, ce
    host: HostIndex
    full: bool = True


def _phase_atoms(y0, y1, r0, r_disc, r_ce):
    """Split [y0, y1] into outside parts, host cells and discarded blocks."""
    atoms = []
    u0 = math.exp(-r0)
    cut = min(r_disc, r_ce) if r_ce is not None else r_disc

    def add(a, b, kind, host, full_len=None):
        lo, hi = max(a, y0), min(b, y1)
        if hi > lo:
            full = full_len is None or (lo <= a and hi >= b)
            atoms.append(_Atom(lo, hi, kind, host, full))

    add(-math.inf, C - u0, "outside", HostIndex(r0 - 1, 0, "outside"))
    # minus side, from the outer edge toward c
    for r in range(r0, cut):
        outer, inner = C - math.exp(-r), C - math.exp(-r - 1)
        if inner <= y0 or outer >= y1:
            continue
        for ell in range(r * r - 1, -1, -1):
            a, b = cell_bounds(r, ell, "minus")
            if ell == r * r - 1:
                a = outer
            if ell == 0:
                b = inner
            if b <= y0 or a >= y1:
                continue
            add(a, b, "cell", HostIndex(r, ell, "minus"), full_len=True)
    if r_ce is not None and r_ce < r_disc:
        add(C - math.exp(-r_ce), C - math.exp(-r_disc), "ce", HostIndex(r_ce, 0, "minus"))
    add(C - math.exp(-r_disc), C + math.exp(-r_disc), "core", HostIndex(r_disc, 0, "plus"))
    if r_ce is not None and r_ce < r_disc:
        add(C + math.exp(-r_disc), C + math.exp(-r_ce), "ce", HostIndex(r_ce, 0, "plus"))
    for r in range(cut - 1, r0 - 1, -1):
        inner, outer = C + math.exp(-r - 1), C + math.exp(-r)
        if inner >= y1 or outer <= y0:
            continue
        for ell in range(r * r):
            a, b = cell_bounds(r, ell, "plus")
            if ell == 0:
                a = inner
            if ell == r * r - 1:
                b = outer
            if b <= y0 or a >= y1:
                continue
            add(a, b, "cell", HostIndex(r, ell, "plus"), full_len=True)
    add(C + u0, math.inf, "outside", HostIndex(r0 - 1, 0, "outside"))
    return atoms


def phase_pieces(y0, y1, r0, r_disc, r_ce=None):
    """Phase-space pieces of an essential return image [y0, y1] after joining.

    Returns a list of (y_left, y_right, kind, host) in increasing y, where kind
    is "outside", "cell", "core" (discarded by the recurrence rule) or "ce"
    (a block of deep cells that all fail the growth condition).
    """
    atoms = _phase_atoms(y0, y1, r0, r_disc, r_ce)
    w0 = cell_width(r0)
    s = math.sqrt(2.0 * math.exp(-r0))
    # outside components: short ones are joined, long ones split
    out = []
    for at in atoms:
        if at.kind == "outside":
            L = at.y1 - at.y0
            if L < w0 and len(atoms) > 1:
                at.full = False
                out.append(at)
            elif L > s:
                k = math.ceil(L / s)
                edges = np.linspace(at.y0, at.y1, k + 1)
                edges[0], edges[-1] = at.y0, at.y1
                for i in range(k):
                    out.append(_Atom(float(edges[i]), float(edges[i + 1]), "outside",
                                     HostIndex(r0 - 1, 0, "outside")))
            else:
                out.append(at)
        else:
            out.append(at)
    atoms = out
    # join partial pieces into their neighbour inside the image; partial pieces
    # only occur at the two ends so each has exactly one neighbour
    while len(atoms) > 1 and not atoms[0].full:
        nb = atoms[1]
        atoms = [_Atom(atoms[0].y0, nb.y1, nb.kind, nb.host, nb.full)] + atoms[2:]
    while len(atoms) > 1 and not atoms[-1].full:
        nb = atoms[-2]
        atoms = atoms[:-2] + [_Atom(nb.y0, atoms[-1].y1, nb.kind, nb.host, nb.full)]
    # number the outside pieces
    res = []
    k_out = 0
    for at in atoms:
        host = at.host
        if at.kind == "outside":
            host = HostIndex(r0 - 1, k_out, "outside")
            k_out += 1
        res.append((at.y0, at.y1, at.kind, host))
    return res


# ----------------------------------------------------------- condition checks

@njit(cache=True)
def _sample_checks(a0, deltas, j, n0, log_lam, kappa0):
    """Per sample: (pass flag, ce margin, recurrence margin, sign of x'_j, sign of x'_{j-1},
    log|x'_j|, log|z| spread helpers)."""
    m = deltas.shape[0]
    ok = np.ones(m, dtype=np.bool_)
    cem = np.full(m, np.inf)
    recm = np.full(m, np.inf)
    sj = np.zeros(m)
    sj1 = np.zeros(m)
    lxp = np.zeros(m)
    for i in range(m):
        xh, xl, dist, logd, sgn, z = _dd.critical_orbit_dd(a0, deltas[i], j)
        for n in range(n0, j + 1):
            c1 = logd[n] - n * log_lam
            ad = abs(dist[n])
            c2 = (np.log(ad) if ad > 0 else -np.inf) + kappa0 * np.log(n)
            if c1 < cem[i]:
                cem[i] = c1
            if c2 < recm[i]:
                recm[i] = c2
        if not (cem[i] >= 0.0 and recm[i] > 0.0):
            ok[i] = False
        sj[i] = sgn[j] * (1.0 if z[j] > 0 else -1.0)
        sj1[i] = sgn[j - 1] * (1.0 if z[j - 1] > 0 else -1.0)
        lxp[i] = np.log(abs(z[j])) + logd[j]
    return ok, cem, recm, sj, sj1, lxp


@njit(cache=True)
def _passes(a0, d, j, n0, log_lam, kappa0):
    xh, xl, dist, logd, sgn, z = _dd.critical_orbit_dd(a0, d, j)
    for n in range(n0, j + 1):
        if logd[n] - n * log_lam < 0.0:
            return False
        ad = abs(dist[n])
        if ad == 0.0 or np.log(ad) + kappa0 * np.log(n) <= 0.0:
            return False
    return True


@njit(cache=True)
def _bisect_condition(a0, good, bad, j, n0, log_lam, kappa0, tol):
    """Boundary between a passing offset ``good`` and a failing offset ``bad``.

    Returns the last passing offset found, so it can serve as a kept endpoint.
    """
    m = good.shape[0]
    out = np.empty(m)
    for i in range(m):
        g = good[i]
        b = bad[i]
        while abs(b - g) > tol[i]:
            mid = g + 0.5 * (b - g)
            if mid == g or mid == b:
                break
            if _passes(a0, mid, j, n0, log_lam, kappa0):
                g = mid
            else:
                b = mid
        out[i] = g
    return out


def pass_conditions(cfg, deltas, j):
    """Growth and recurrence conditions for N0 <= n <= j at offsets ``deltas``."""
    ok, cem, recm, _, _, _ = _sample_checks(
        cfg.a_star, np.ascontiguousarray(deltas, dtype=float), j, cfg.N0,
        math.log(cfg.lambda_ce), cfg.kappa0)
    return ok, cem, recm


# ----------------------------------------------------------------- builder

class _Builder:
    def __init__(self, cfg):
        self.cfg = cfg
        self.all = []
        self.log_lam = math.log(cfg.lambda_ce)
        self.small_c = 0.0

    def new(self, lo, hi, born, host, history=(), bound_until=0, parent=-1,
            status=ACTIVE, reason=""):
        iv = ParamInterval(lo=float(lo), hi=float(hi), a0=self.cfg.a_star, born=born,
                           host_at_birth=host, history=tuple(history),
                           bound_until=bound_until, status=status, reason=reason,
                           uid=len(self.all), parent=parent)
        if status != ACTIVE:
            iv.ended = born
        self.all.append(iv)
        return iv

    # essential return: subdivide in phase space and pull back
    def subdivide(self, iv, j, y_lo, y_hi, r_ce=None):
        cfg = self.cfg
        thr = discard_depth(j, cfg.kappa0, cfg.exclusion, cfg.alpha_bc)
        r_disc = max(cfg.r0, int(math.ceil(thr)))
        if r_ce is not None and r_ce >= r_disc:
            r_ce = None
        orient = 1.0 if y_hi >= y_lo else -1.0
        y0, y1 = min(y_lo, y_hi), max(y_lo, y_hi)
        pieces = phase_pieces(y0, y1, cfg.r0, r_disc, r_ce)
        inner = np.array([p[1] for p in pieces[:-1]], dtype=float)
        m = inner.size
        tol = np.full(m, 1e-15 * iv.length)
        cuts = _dd.batch_pullback(cfg.a_star, np.full(m, iv.lo), np.full(m, iv.hi), inner,
                                  j - 1, np.full(m, orient), tol)
        if orient < 0:
            cuts = cuts[::-1]
            pieces = pieces[::-1]
        cuts = np.maximum.accumulate(np.clip(cuts, iv.lo, iv.hi))
        edges = np.concatenate([[iv.lo], cuts, [iv.hi]])
        children = []
        for k, (_, _, kind, host) in enumerate(pieces):
            lo, hi = edges[k], edges[k + 1]
            if hi <= lo:
                continue
            children.append((lo, hi, kind, host))
        return children

    def run(self):
        cfg = self.cfg
        D = cfg.max_depth
        e = tail_sums(cfg.d1 * cfg.kappa0, D + 1)
        total = 2.0 * cfg.epsilon
        root = self.new(-cfg.epsilon, cfg.epsilon, 0, HostIndex(cfg.r0 - 1, 0, "outside"))
        nu1 = _first_return(cfg, max(D, cfg.N0))
        self.nu1 = nu1
        if nu1 is not None and nu1 < cfg.N0:
            raise RootTooWide(f"first return of the root interval at {nu1} < N0 = {cfg.N0}")
        levels = []
        active = [root]
        for j in range(0, min(D, cfg.N0) + 1):
            levels.append(PartitionLevel(j, list(active), total, 0.0, float(e[j])))
        for j in range(cfg.N0 + 1, D + 1):
            active, excluded = self.step(active, j)
            if not active:
                raise EmptyPartition(f"every interval was excluded at level {j}")
            retained = math.fsum(iv.length for iv in active)
            exc = math.fsum(iv.length for iv in excluded)
            levels.append(PartitionLevel(j, active, retained, exc, float(e[j]), excluded))
        return levels

    def step(self, active, j):
        cfg = self.cfg
        nxt = []
        excluded = []
        ends = np.empty(2 * len(active))
        for i, iv in enumerate(active):
            ends[2 * i], ends[2 * i + 1] = iv.lo, iv.hi
        y = image(cfg.a_star, ends, j - 1).reshape(-1, 2)
        for iv, (ya, yb) in zip(active, y):
            ev = classify_return(iv, j, cfg, y=(ya, yb))
            if ev is None:
                nxt.append(iv)
            elif ev.kind == "bound":
                iv.history = iv.history + (ev,)
                nxt.append(iv)
            elif ev.kind == "inessential":
                p = self.binding(iv, ev.host.r, j)
                iv.history = iv.history + (replace(ev, binding_length=p),)
                iv.bound_until = j + p + 1
                nxt.append(iv)
            else:
                nxt.extend(self.essential(iv, j, ya, yb, excluded))
        if cfg.fa_tau is not None:
            kept = []
            for iv in nxt:
                if self.free_time(iv, j) < (1 - cfg.fa_tau) * j:
                    self.exclude(iv, j, EXCLUDED_FA, "fa")
                    excluded.append(iv)
                else:
                    kept.append(iv)
            nxt = kept
        nxt = self.check(nxt, j, excluded)
        nxt.sort(key=lambda v: v.lo)
        return nxt, excluded

    def exclude(self, iv, j, status, reason):
        iv.status = status
        iv.reason = reason
        iv.ended = j

    def free_time(self, iv, j):
        bound = 0
        for ev in iv.history:
            if ev.kind in ("essential", "inessential") and not ev.host.outside:
                bound += min(ev.binding_length + 1, max(j - ev.time, 0))
        return j - bound

    def binding(self, iv, r, j, samples=None):
        cfg = self.cfg
        s = iv.samples(cfg.samples_per_interval) if samples is None else samples
        p = _dd.batch_binding(cfg.a_star, s, np.full(s.size, int(r)), np.full(s.size, int(j)),
                              cfg.beta_bc, cfg.p_max, LAMBDA)
        return int(p.min())

    def essential(self, iv, j, ya, yb, excluded):
        cfg = self.cfg
        s = iv.samples(cfg.samples_per_interval)
        XH, DI, LD, SG, Z = _dd.batch_orbit(cfg.a_star, s, j - 1)
        sgn = SG[:, j - 1] * np.sign(Z[:, j - 1])
        if np.any(sgn != sgn[0]):
            raise MonotonicityViolation(
                f"x'_{j - 1} changes sign on interval {iv.uid} at level {j}")
        # deep cells whose growth factor provably stays below lambda^j
        lmax = float(LD[:, j - 1].max())
        a_hi = cfg.a_star + cfg.epsilon
        bound = lmax + math.log(cfg.ce_merge_factor) + math.log(2 * a_hi) - j * self.log_lam
        r_ce = max(cfg.r0, int(math.floor(bound)) + 1)
        kids = self.subdivide(iv, j, ya, yb, r_ce=r_ce)
        self.exclude(iv, j, SPLIT, "")
        out = []
        for lo, hi, kind, host in kids:
            if kind == "core":
                ev = ReturnEvent(j, "escape", host)
                ch = self.new(lo, hi, j, host, iv.history + (ev,), j, iv.uid,
                              EXCLUDED_RECURRENCE, "recurrence")
                excluded.append(ch)
            elif kind == "ce":
                ev = ReturnEvent(j, "essential", host)
                ch = self.new(lo, hi, j, host, iv.history + (ev,), j, iv.uid,
                              EXCLUDED_CONDITION, "ce")
                excluded.append(ch)
            elif kind == "outside":
                ev = ReturnEvent(j, "essential", host)
                out.append(self.new(lo, hi, j, host, iv.history + (ev,), j, iv.uid))
            else:
                if exclusion_rule(host, j, cfg.kappa0, cfg.exclusion, cfg.alpha_bc):
                    ev = ReturnEvent(j, "escape", host)
                    ch = self.new(lo, hi, j, host, iv.history + (ev,), j, iv.uid,
                                  EXCLUDED_RECURRENCE, "recurrence")
                    excluded.append(ch)
                    continue
                tmp = ParamInterval(lo, hi, cfg.a_star, j, host)
                p = self.binding(tmp, host.r, j)
                ev = ReturnEvent(j, "essential", host, p)
                out.append(self.new(lo, hi, j, host, iv.history + (ev,), j + p + 1, iv.uid))
        return out

    def check(self, ivs, j, excluded, depth=0):
        """Verify the conditions at sample parameters; trim failing parts."""
        cfg = self.cfg
        if not ivs:
            return ivs
        k = cfg.samples_per_interval
        S = np.concatenate([iv.samples(k) for iv in ivs])
        ok, cem, recm, sj, sj1, _ = _sample_checks(cfg.a_star, S, j, cfg.N0, self.log_lam,
                                                   cfg.kappa0)
        ok = ok.reshape(-1, k)
        cem = cem.reshape(-1, k)
        recm = recm.reshape(-1, k)
        sj = sj.reshape(-1, k)
        S = S.reshape(-1, k)
        kept = []
        for idx, iv in enumerate(ivs):
            o = ok[idx]
            if o.all():
                if np.any(sj[idx] != sj[idx, 0]):
                    self.exclude(iv, j, EXCLUDED_CONDITION, "monotonicity")
                    excluded.append(iv)
                    continue
                iv.ce_margin = float(cem[idx].min())
                iv.recurrence_margin = float(recm[idx].min())
                kept.append(iv)
                continue
            if not o.any():
                self.exclude(iv, j, EXCLUDED_CONDITION, self._reason(cem[idx], recm[idx]))
                excluded.append(iv)
                continue
            if depth >= 8:
                self.exclude(iv, j, EXCLUDED_CONDITION, self._reason(cem[idx], recm[idx]))
                excluded.append(iv)
                continue
            kept.extend(self.trim(iv, j, S[idx], o, cem[idx], recm[idx], excluded, depth))
        return kept

    @staticmethod
    def _reason(cem, recm):
        return "ce" if np.min(cem) < 0 else "polapproach"

    def trim(self, iv, j, s, o, cem, recm, excluded, depth):
        cfg = self.cfg
        # boundaries between consecutive samples of different status
        goods, bads, where = [], [], []
        for i in range(len(s) - 1):
            if o[i] != o[i + 1]:
                g, b = (s[i], s[i + 1]) if o[i] else (s[i + 1], s[i])
                goods.append(g)
                bads.append(b)
                where.append(i)
        goods = np.array(goods)
        tol = np.full(goods.size, 1e-15 * iv.length)
        cuts = _bisect_condition(cfg.a_star, goods, np.array(bads), j, cfg.N0,
                                 self.log_lam, cfg.kappa0, tol)
        edges = [iv.lo]
        for c in cuts:
            edges.append(float(c))
        edges.append(iv.hi)
        edges = np.maximum.accumulate(np.array(edges))
        status = [bool(o[0])]
        for i in where:
            status.append(bool(o[i + 1]))
        self.exclude(iv, j, SPLIT, "trim")
        kept = []
        reason = self._reason(cem, recm)
        for k_, st in enumerate(status):
            lo, hi = edges[k_], edges[k_ + 1]
            if hi <= lo:
                continue
            if st:
                ch = self.new(lo, hi, j, iv.host_at_birth, iv.history, iv.bound_until, iv.uid)
                kept.append(ch)
            else:
                ch = self.new(lo, hi, j, iv.host_at_birth, iv.history, iv.bound_until, iv.uid,
                              EXCLUDED_CONDITION, reason)
                excluded.append(ch)
        # re-verify the kept pieces at their own samples
        return self.check(kept, j, excluded, depth + 1) if kept else kept


@dataclass
class Partition:
    """Result of the construction: levels plus every interval ever created."""

    config: ConstructionConfig
    levels: list
    intervals: list
    nu1: int = None
    small_constant: float = math.nan

    @property
    def deepest(self):
        return self.levels[-1]

    def retained_fraction(self):
        return self.levels[-1].retained_measure / (2 * self.config.epsilon)


def build_partition(cfg):
    """Run the construction to cfg.max_depth."""
    b = _Builder(cfg)
    levels = b.run()
    part = Partition(cfg, levels, b.all, b.nu1)
    part.small_constant = small_constant(part)
    return part


def small_constant(part):
    """Realized C in |omega| <= C lambda^{-n} |x_n(omega)| over all levels n > N0."""
    cfg = part.config
    best = 0.0
    for lev in part.levels:
        n = lev.level
        if n <= cfg.N0 or not lev.intervals:
            continue
        lo = np.array([iv.lo for iv in lev.intervals])
        hi = np.array([iv.hi for iv in lev.intervals])
        ya = image(cfg.a_star, lo, n)
        yb = image(cfg.a_star, hi, n)
        ratio = (hi - lo) * cfg.lambda_ce ** n / np.maximum(np.abs(yb - ya), 1e-300)
        best = max(best, float(ratio.max()))
    return best


# ------------------------------------------------------------------ reports

@dataclass
class SmallImageReport:
    level: int
    threshold: float
    min_image: float
    violations: list


def no_small_image_check(level, cfg):
    """Compare |x_j(omega)| with j^{-kappa1} for every active interval of a level."""
    j = level.level
    thr = float(j) ** (-cfg.kappa1) if j > 0 else 1.0
    if not level.intervals:
        return SmallImageReport(j, thr, math.inf, [])
    lo = np.array([iv.lo for iv in level.intervals])
    hi = np.array([iv.hi for iv in level.intervals])
    size = np.abs(image(cfg.a_star, hi, j) - image(cfg.a_star, lo, j))
    bad = [level.intervals[i].uid for i in np.nonzero(size <= thr)[0]]
    return SmallImageReport(j, thr, float(size.min()), bad)


@dataclass
class DistortionResult:
    max_ratio: float
    bound_ok: bool
    gate_ok: bool
    image_length: float
    band: tuple  # (min, max) of x'_n/x'_j over (T^{n-j})'(x_j), 1 <= j <= n


def distortion_check(interval, n, alpha, sample_pairs=4, C_fit=10.0, M0=40.0):
    """Parameter-derivative distortion of x_n over an interval."""
    k = max(int(sample_pairs) + 1, 2)
    s = interval.samples(k) if interval.hi > interval.lo else np.array([interval.lo] * 2)
    XH, DI, LD, SG, Z = _dd.batch_orbit(interval.a0, s, n)
    if np.any(DI[:, :n] == 0.0) or np.any(Z[:, 1:n + 1] == 0):
        from .errors import DegenerateDerivative
        raise DegenerateDerivative("derivative vanishes on the sampled interval")
    lx = np.log(np.abs(Z[:, n])) + LD[:, n]
    max_ratio = float(np.exp(lx.max() - lx.min()))
    y = image(interval.a0, np.array([interval.lo, interval.hi]), n)
    length = float(abs(y[1] - y[0]))
    bound_ok = max_ratio <= 1.0 + C_fit * length ** alpha
    gate_ok = length <= float(n) ** (-M0 / (1.0 - alpha)) if n > 1 else True
    # x'_n/x'_j divided by (T^{n-j})'(x_j) equals z_n / z_j
    ratios = Z[:, n][:, None] / Z[:, 1:n + 1]
    band = (float(ratios.min()), float(ratios.max()))
    return DistortionResult(max_ratio, bool(bound_ok), bool(gate_ok), length, band)


def measure_report(levels, cfg):
    """Rows (j, retained, excluded, e_j, bound_ok) for every level."""
    rows = []
    prev = None
    for lev in levels:
        if prev is None or lev.level <= cfg.N0:
            ok = True
        else:
            ok = lev.retained_measure >= (1.0 - cfg.d0 * lev.e_j) * prev
        rows.append((lev.level, lev.retained_measure, lev.excluded_this_level, lev.e_j, bool(ok)))
        prev = lev.retained_measure
    return rows


def conservation_error(part):
    """| retained + cumulative excluded - |omega_0| | at the deepest level."""
    total = 2.0 * part.config.epsilon
    exc = math.fsum(lev.excluded_this_level for lev in part.levels)
    return abs(part.levels[-1].retained_measure + exc - total)


# ------------------------------------------------------------------ reload

def interval_from_dict(d, a0):
    """Inverse of ParamInterval.to_dict."""
    host = HostIndex(int(d["host"]["r"]), int(d["host"]["ell"]), d["host"]["side"])
    hist = tuple(ReturnEvent(int(e["time"]), e["kind"], HostIndex(int(e["r"]), int(e["ell"]), e["side"]),
                             int(e["p"])) for e in d["returns"])
    return ParamInterval(lo=float(d["lo"]), hi=float(d["hi"]), a0=a0, born=int(d["level"]),
                         host_at_birth=host, history=hist, bound_until=int(d["bound_until"]),
                         status=d["status"], ended=None if d["ended"] is None else int(d["ended"]),
                         reason=d["reason"], uid=int(d["uid"]), parent=int(d["parent"]),
                         ce_margin=float(d["ce_margin"]),
                         recurrence_margin=float(d["recurrence_margin"]))


def levels_from_intervals(intervals, cfg):
    """Rebuild the levels from every interval ever created.

    An interval is active at level j when born <= j < ended, and counts as
    excluded at level j when it carries an excluded status with ended == j.
    """
    D = cfg.max_depth
    e = tail_sums(cfg.d1 * cfg.kappa0, D + 1)
    levels = []
    for j in range(D + 1):
        act = sorted((iv for iv in intervals
                      if iv.born <= j and (iv.ended is None or j < iv.ended)), key=lambda v: v.lo)
        exc = [iv for iv in intervals if iv.status in EXCLUDED and iv.ended == j]
        levels.append(PartitionLevel(j, act, math.fsum(iv.length for iv in act),
                                     math.fsum(iv.length for iv in exc), float(e[j]), exc))
    levels[0].retained_measure = 2.0 * cfg.epsilon
    return levels
