"""Block sums, martingale approximation and limit-theorem diagnostics.

The parameter observables xi_i(a) = phi_a(x_i(a)) are averaged over cells of
the constructed partition: chi_i is the conditional expectation of xi_i given
the level-r_i cells (r_i = i + floor(i^delta)), y_j sums chi_i over the block
I_j, and Y_j = y_j + u_{j+1} - u_j is the martingale difference built from
the corrections u_j = sum_k E(y_{j+k} | L_{j-1}).  Levels deeper than the
construction are replaced by the deepest level.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit
from scipy import stats as sps

from . import _dd
from .errors import ConfigError, EmptyCell, GateViolated, TruncationDominates
from .orbit import LAMBDA

# ------------------------------------------------------------------ blocks


def block_size(j):
    """|I_j|: 1 for j = 1, else floor(j^{2/3}) (largest m with m^3 <= j^2)."""
    if j < 1:
        raise ValueError("block index must be >= 1")
    if j == 1:
        return 1
    t = j * j
    m = int(round(t ** (1.0 / 3.0)))
    while m ** 3 > t:
        m -= 1
    while (m + 1) ** 3 <= t:
        m += 1
    return m


def block_sizes(M):
    """Array of |I_1|..|I_M| using exact integer cube roots."""
    j = np.arange(1, M + 1, dtype=np.int64)
    t = j * j
    m = np.rint(np.cbrt(t.astype(float))).astype(np.int64)
    m -= (m ** 3 > t)
    m += ((m + 1) ** 3 <= t)
    m[0] = 1
    return m


@dataclass
class BlockScheme:
    """Consecutive blocks I_1 = {1}, |I_j| = floor(j^{2/3})."""

    gamma: float = 0.45
    delta: float = 0.1
    _ends: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.4 < self.gamma < 0.5):
            raise ConfigError("block scheme violates invariant: 2/5 < gamma < 1/2")
        # decided on the decimal values; the defaults sit on the upper edge
        g, d = Fraction(str(self.gamma)), Fraction(str(self.delta))
        if not (0 < d < Fraction(1, 5) and d <= 2 * (g - Fraction(2, 5))):
            raise ConfigError(
                "block scheme violates invariant: 0 < delta < min(1/5, 2(gamma - 2/5))")
        self._ends = np.cumsum(block_sizes(64))

    def _grow(self, N):
        while self._ends[-1] < N:
            M = 2 * len(self._ends)
            self._ends = np.cumsum(block_sizes(M))

    def block_of(self, N):
        """The unique M with N in I_M."""
        if N < 1:
            raise ValueError("N must be >= 1")
        self._grow(N)
        return int(np.searchsorted(self._ends, N) + 1)

    def block_of_many(self, N):
        N = np.asarray(N)
        self._grow(int(N.max()))
        return np.searchsorted(self._ends, N) + 1

    def block(self, j):
        """I_j as a range of integers."""
        self._grow(1)
        while len(self._ends) < j:
            self._ends = np.cumsum(block_sizes(2 * len(self._ends)))
        end = int(self._ends[j - 1])
        start = end - block_size(j) + 1
        return range(start, end + 1)

    def r_index(self, i):
        return r_index(i, self.delta)


_default = BlockScheme()


def block_of(N):
    return _default.block_of(N)


def blocks(M):
    return _default.block(M)


def r_index(i, delta):
    """r_i = i + floor(i^delta), with the floor decided in exact arithmetic."""
    if i < 1:
        raise ValueError("i must be >= 1")
    fr = Fraction(delta).limit_denominator(1000)
    p, q = fr.numerator, fr.denominator
    m = int(math.floor(i ** float(fr)))
    # m <= i^{p/q}  <=>  m^q <= i^p
    while m > 0 and m ** q > i ** p:
        m -= 1
    while (m + 1) ** q <= i ** p:
        m += 1
    return i + m


# ------------------------------------------------------------------ constants


@dataclass
class HarnessConfig:
    """Harness constants: lambda0 = min(lambda_ce^theta, rho^{-1/2}),
    eta the largest value with (2 Lambda / lambda_ce)^eta <= lambda0, and
    alpha = 3 / (M0 + 3)."""

    theta: float
    rho: float
    lambda_ce: float
    M0: float = 40.0
    lambda0: float = None
    eta: float = None
    alpha: float = None

    def __post_init__(self):
        if not (0 < self.rho < 1):
            raise ConfigError("harness config violates invariant: 0 < rho < 1")
        if not (self.theta > 0):
            raise ConfigError("harness config violates invariant: theta > 0")
        lam0 = min(self.lambda_ce ** self.theta, self.rho ** -0.5)
        if self.lambda0 is None:
            self.lambda0 = lam0
        if self.eta is None:
            self.eta = math.log(self.lambda0) / math.log(2 * LAMBDA / self.lambda_ce)
        if self.alpha is None:
            self.alpha = 3.0 / (self.M0 + 3.0)
        self.validate()

    def validate(self):
        lam0 = min(self.lambda_ce ** self.theta, self.rho ** -0.5)
        if self.lambda0 > lam0 * (1 + 1e-12):
            raise ConfigError("harness config violates invariant: lambda0 = min(lambda_ce^theta, rho^-1/2)")
        if (2 * LAMBDA / self.lambda_ce) ** self.eta > self.lambda0 * (1 + 1e-12):
            raise ConfigError("harness config violates invariant: (2 Lambda / lambda_ce)^eta <= lambda0")
        if self.M0 / (1 - self.alpha) > 3 / self.alpha * (1 + 1e-12):
            raise ConfigError("harness config violates invariant: M0 / (1 - alpha) <= 3 / alpha")

    def max_n(self, k):
        """Largest n allowed by n <= eta k / 2."""
        return int(math.floor(self.eta * k / 2))


# ------------------------------------------------------------------ cells


_GL_NODES = {}


def gauss_legendre(n):
    if n not in _GL_NODES:
        _GL_NODES[n] = np.polynomial.legendre.leggauss(n)
    return _GL_NODES[n]


@dataclass
class CellTree:
    """Cells of every partition level restricted to the deepest kept intervals.

    ``cell_of_leaf[r]`` maps each deepest interval (leaf) to its level-r cell;
    quadrature nodes sit inside the leaves with weights summing to the leaf
    lengths.
    """

    a0: float
    depth: int
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray
    cell_of_leaf: list
    cell_bounds: list
    nodes: np.ndarray
    weights: np.ndarray
    node_leaf: np.ndarray

    @property
    def n_leaves(self):
        return len(self.leaf_lo)

    def leaf_weights(self):
        return self.leaf_hi - self.leaf_lo

    def level_of(self, r):
        return min(r, self.depth)


def build_cell_tree(levels, a0, n_nodes=16):
    """CellTree from partition levels (deepest level gives the leaves)."""
    deep = levels[-1].intervals
    if not deep:
        raise EmptyCell("deepest level is empty")
    leaf_lo = np.array([iv.lo for iv in deep])
    leaf_hi = np.array([iv.hi for iv in deep])
    cell_of_leaf, bounds = [], []
    for lev in levels:
        lo = np.array([iv.lo for iv in lev.intervals])
        hi = np.array([iv.hi for iv in lev.intervals])
        idx = np.searchsorted(lo, leaf_lo, side="right") - 1
        if np.any(idx < 0) or np.any(leaf_hi > hi[idx] + 0.0):
            raise EmptyCell(f"leaves are not nested in level {lev.level}")
        used, inv = np.unique(idx, return_inverse=True)
        cell_of_leaf.append(inv.astype(np.int64))
        bounds.append((lo[used], hi[used]))
    x, w = gauss_legendre(n_nodes)
    half = 0.5 * (leaf_hi - leaf_lo)
    mid = 0.5 * (leaf_hi + leaf_lo)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    node_leaf = np.repeat(np.arange(len(leaf_lo)), n_nodes)
    return CellTree(a0, len(levels) - 1, leaf_lo, leaf_hi, cell_of_leaf, bounds,
                    nodes, weights, node_leaf)


def chi(values, weights, cell_of_node, n_cells=None):
    """Cell averages of node values (one value per cell).

    Raises EmptyCell if a cell receives no weight.
    """
    n_cells = int(cell_of_node.max()) + 1 if n_cells is None else n_cells
    W = np.bincount(cell_of_node, weights, minlength=n_cells)
    if np.any(W <= 0):
        raise EmptyCell("a cell contains no kept sub-interval")
    return np.bincount(cell_of_node, weights * values, minlength=n_cells) / W


def y_block(chis, cell_maps):
    """y_j = sum of chi_i (each given per cell) pulled back to a common refinement."""
    out = 0.0
    for c, m in zip(chis, cell_maps):
        out = out + np.asarray(c)[m]
    return out


# ------------------------------------------------------------------ orbit streams


@njit(cache=True)
def _advance(a0, deltas, H, L, steps, out):
    """Advance double-double states (H, L) by ``steps`` iterations, storing each point."""
    m = deltas.shape[0]
    for q in range(m):
        ah, al = _dd.two_sum(a0, deltas[q])
        h = H[q]
        l = L[q]
        for s in range(steps):
            h, l = _dd.dd_step(ah, al, h, l)
            out[s, q] = h + l
        H[q] = h
        L[q] = l


class OrbitStream:
    """Critical orbits x_1, x_2, ... for many parameters, produced in chunks.

    Points are in double-double for accuracy; after a few hundred steps they
    are pseudo-orbits, which is harmless for statistics.
    """

    def __init__(self, a0, deltas):
        self.a0 = float(a0)
        self.deltas = np.ascontiguousarray(deltas, dtype=float)
        # x_0 = a / 4 in double-double
        self.H = np.empty_like(self.deltas)
        self.L = np.empty_like(self.deltas)
        for q in range(len(self.deltas)):
            s = self.a0 + self.deltas[q]
            e = self.deltas[q] - (s - self.a0)
            self.H[q], self.L[q] = 0.25 * s, 0.25 * e
        self.i = 0

    def next(self, steps):
        """Points x_{i+1}..x_{i+steps} as an array of shape (steps, n_params)."""
        out = np.empty((steps, len(self.deltas)))
        _advance(self.a0, self.deltas, self.H, self.L, steps, out)
        self.i += steps
        return out


def xi_sums(a0, deltas, table, start, stop, chunk=256):
    """Stream xi_i(a) = phi_a(x_i(a)) for start <= i <= stop, yielding (i0, block)."""
    stream = OrbitStream(a0, deltas)
    a = a0 + np.asarray(deltas)
    if start > 1:
        skip = start - 1
        while skip > 0:
            s = min(chunk, skip)
            stream.next(s)
            skip -= s
    i = start
    while i <= stop:
        s = min(chunk, stop - i + 1)
        x = stream.next(s)
        yield i, table.apply(a[None, :], x)
        i += s


# ------------------------------------------------------------------ martingale


@dataclass
class MartingaleSeq:
    """Block sums and their martingale approximation on the deepest leaves.

    Arrays are indexed [j - 1, leaf]; ``labels[m]`` identifies the cells of
    L_m (the algebra generated by y_1..y_m).
    """

    y: np.ndarray
    u: np.ndarray
    Y: np.ndarray
    weights: np.ndarray
    labels: list
    K_u: int
    J: int
    cond_Y: np.ndarray = None
    cond_se: np.ndarray = None
    tail: np.ndarray = None

    @property
    def v(self):
        return self.u[:-1] - self.u[1:]


def refine_labels(labels, values):
    """Labels of the partition generated by ``labels`` and the exact ``values``."""
    pairs = np.stack([labels.astype(float), values]).T
    _, inv = np.unique(pairs, axis=0, return_inverse=True)
    return inv.ravel().astype(np.int64)


def cond_exp(values, weights, labels):
    """E(values | labels) as an array over leaves (weighted cell averages)."""
    n = int(labels.max()) + 1
    W = np.bincount(labels, weights, minlength=n)
    S = np.bincount(labels, weights * values, minlength=n)
    return (S / W)[labels]


def martingale(ys, weights, K_u=40, J=None, check=True):
    """Corrections u_j and martingale differences Y_j from block sums.

    ys: array (J + K_u, n_leaves) of y_1..y_{J+K_u}; weights are the leaf
    lengths.  With ``check``, raises TruncationDominates when the extrapolated
    tail of some u_j exceeds 10% of its norm.
    """
    ys = np.asarray(ys, dtype=float)
    total = ys.shape[0]
    if J is None:
        J = total - K_u
    if J < 1 or J + K_u > total:
        raise ValueError("need y_j for j up to J + K_u")
    n = ys.shape[1]
    labels = [np.zeros(n, dtype=np.int64)]
    for m in range(1, J + 1):
        labels.append(refine_labels(labels[-1], ys[m - 1]))
    # u_j for j = 1..J+1 uses L_{j-1}
    u = np.zeros((J + 1, n))
    tail = np.zeros(J + 1)
    for j in range(1, J + 2):
        lab = labels[j - 1] if j - 1 < len(labels) else labels[-1]
        acc = np.zeros(n)
        norms = []
        for k in range(K_u):
            idx = j + k - 1
            if idx >= total:
                break
            e = cond_exp(ys[idx], weights, lab)
            acc += e
            norms.append(math.sqrt(np.average(e * e, weights=weights)))
        u[j - 1] = acc
        tail[j - 1] = _tail_estimate(norms)
    Y = ys[:J] + u[1:J + 1] - u[:J]
    seq = MartingaleSeq(ys, u, Y, weights, labels, K_u, J, tail=tail)
    seq.cond_Y = np.array([cond_exp(Y[j - 1], weights, labels[j - 1]) for j in range(1, J + 1)])
    if check:
        flags = truncation_flags(seq, np.full(J, np.inf))
        if flags:
            j = flags[0]
            raise TruncationDominates(
                f"u_{j}: tail estimate {tail[j - 1]:.3g} exceeds 10% of its norm")
    return seq


def _tail_estimate(norms):
    """Geometric extrapolation of sum_{k >= K} of decaying conditional norms."""
    m = np.asarray(norms)
    if len(m) < 4 or np.any(m <= 0):
        return 0.0
    k = np.arange(len(m))
    slope = np.polyfit(k, np.log(m), 1)[0]
    if slope >= 0:
        return math.inf
    q = math.exp(slope)
    if q >= 1.0:
        return math.inf
    return float(m[-1] * q / (1 - q))


def truncation_flags(seq, zstat, frac=0.1, z=3.0):
    """Blocks j whose truncation tail exceeds frac * ||u_j||.

    The tail only counts when the first omitted term, E(y_{j+K_u} | L_{j-1}),
    is significantly nonzero (|z| > 3); otherwise it is Monte Carlo noise.
    """
    out = []
    for j in range(1, seq.J + 1):
        if not zstat[j - 1] > z:
            continue
        un = math.sqrt(np.average(seq.u[j - 1] ** 2, weights=seq.weights))
        if seq.tail[j - 1] > frac * un:
            out.append(j)
    return out


def telescoping_error(seq, M=None):
    """max over leaves of |sum_{j<=M} (Y_j - y_j) - (u_{M+1} - u_1)|."""
    M = seq.J if M is None else M
    lhs = np.sum(seq.Y[:M] - seq.y[:M], axis=0)
    rhs = seq.u[M] - seq.u[0]
    return float(np.max(np.abs(lhs - rhs)))


# ------------------------------------------------------------------ harness run


@dataclass
class HarnessResult:
    scheme: BlockScheme
    tree: CellTree
    seq: MartingaleSeq
    chi_records: list
    chi_error: np.ndarray
    martingale_z: np.ndarray
    node_mean: np.ndarray
    node_se: np.ndarray
    truncation: list = field(default_factory=list)

    def martingale_ok(self, z=3.0):
        return bool(np.all(self.martingale_z <= z))

    def u_growth_exponent(self):
        """Slope of log ||u_j|| against log j."""
        return growth_exponent(self.seq.u, self.seq.weights)

    def chi_decay(self, delta):
        """Slope of -log max|xi_i - chi_i| against i^delta over indices with finite cells."""
        i = np.arange(len(self.chi_error))
        ok = np.isfinite(self.chi_error) & (self.chi_error > 0)
        ok &= np.array([self.tree.level_of(r_index(k, delta)) < self.tree.depth if k else False
                        for k in i])
        if ok.sum() < 3:
            return math.nan
        return float(-np.polyfit(i[ok] ** delta, np.log(self.chi_error[ok]), 1)[0])


def growth_exponent(u, weights):
    j = np.arange(1, u.shape[0] + 1)
    n = np.sqrt(np.average(u * u, axis=1, weights=weights))
    ok = n > 0
    if ok.sum() < 3:
        return math.nan
    return float(np.polyfit(np.log(j[ok]), np.log(n[ok]), 1)[0])


def run_harness(tree, table, scheme, J=50, K_u=40, chunk=128, chi_dump_max=None, check=True):
    """Compute chi_i, y_j (j <= J + K_u) and the martingale on the leaves.

    For each j the conditional mean E(y_{j+K_u} | L_{j-1}) (which equals
    E(Y_j | L_{j-1}) exactly) is also estimated directly from node-level block
    sums, with a standard error from the node spread inside each cell.
    With ``check`` a significant truncation tail raises TruncationDominates;
    otherwise the offending blocks are listed in ``truncation``.
    """
    n_leaf = tree.n_leaves
    n_nodes = len(tree.nodes)
    jmax = J + K_u
    last = scheme.block(jmax)[-1]
    ends = {scheme.block(j)[-1]: j for j in range(1, jmax + 1)}
    ys = np.zeros((jmax, n_leaf))
    leaf_w = tree.leaf_weights()
    chi_records = []
    chi_err = np.full(last + 1, np.nan)
    # per-level node -> cell maps
    node_cells = {}
    bnode = np.zeros(n_nodes)
    labels = [np.zeros(n_leaf, dtype=np.int64)]
    node_mean = np.zeros(J)
    node_se = np.zeros(J)
    zstat = np.zeros(J)
    pending = {}
    for i0, xis in xi_sums(tree.a0, tree.nodes, table, 1, last, chunk):
        for s in range(xis.shape[0]):
            i = i0 + s
            xi = xis[s]
            r = tree.level_of(scheme.r_index(i))
            if r not in node_cells:
                node_cells[r] = tree.cell_of_leaf[r][tree.node_leaf]
            nc = node_cells[r]
            ncell = len(tree.cell_bounds[r][0])
            c = chi(xi, tree.weights, nc, ncell)
            chi_err[i] = float(np.max(np.abs(xi - c[nc])))
            if chi_dump_max is not None and i <= chi_dump_max:
                lo, hi = tree.cell_bounds[r]
                chi_records.extend(
                    {"i": i, "level": r, "lo": float(lo[k]), "hi": float(hi[k]),
                     "chi": float(c[k])} for k in range(ncell))
            j = scheme.block_of(i)
            ys[j - 1] += c[tree.cell_of_leaf[r]]
            bnode += xi
            if i in ends:
                jj = ends[i]
                if jj <= J:
                    labels.append(refine_labels(labels[-1], ys[jj - 1]))
                target = jj - K_u
                if 1 <= target <= J:
                    m, se = _cell_mean_se(bnode, tree.weights, labels[target - 1][tree.node_leaf])
                    node_mean[target - 1] = m
                    node_se[target - 1] = se
                bnode = np.zeros(n_nodes)
    seq = martingale(ys, leaf_w, K_u, J, check=False)
    for j in range(1, J + 1):
        e = seq.cond_Y[j - 1]
        num = math.sqrt(np.average(e * e, weights=leaf_w))
        zstat[j - 1] = num / node_se[j - 1] if node_se[j - 1] > 0 else (0.0 if num == 0 else math.inf)
    flags = truncation_flags(seq, zstat)
    if check and flags:
        j = flags[0]
        raise TruncationDominates(f"u_{j}: truncation tail {seq.tail[j - 1]:.3g} is significant")
    return HarnessResult(scheme, tree, seq, chi_records, chi_err, zstat, node_mean, node_se, flags)


def _cell_mean_se(values, weights, labels):
    """Weighted L2 norms over cells of the cell means and of their standard errors."""
    n = int(labels.max()) + 1
    W = np.bincount(labels, weights, minlength=n)
    W2 = np.bincount(labels, weights * weights, minlength=n)
    mean = np.bincount(labels, weights * values, minlength=n) / W
    dev = values - mean[labels]
    var = np.bincount(labels, weights * dev * dev, minlength=n) / W
    neff = W * W / W2
    se2 = np.where(neff > 1, var / np.maximum(neff - 1, 1e-300), 0.0)
    p = W / W.sum()
    return math.sqrt(np.sum(p * mean ** 2)), math.sqrt(np.sum(p * se2))


# ------------------------------------------------------------------ parameter samples


def sample_parameters(tree_or_leaves, count, seed):
    """Parameters drawn uniformly by Lebesgue measure from the deepest kept set."""
    if isinstance(tree_or_leaves, CellTree):
        lo, hi = tree_or_leaves.leaf_lo, tree_or_leaves.leaf_hi
    else:
        lo, hi = tree_or_leaves
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 7]))
    w = hi - lo
    cdf = np.cumsum(w)
    u = rng.random(count) * cdf[-1]
    k = np.minimum(np.searchsorted(cdf, u, side="right"), len(lo) - 1)
    t = rng.random(count)
    return lo[k] + t * w[k]


def xi_matrix(a0, deltas, table, start, stop, chunk=256):
    """xi_i at each parameter for start <= i <= stop, shape (stop - start + 1, n)."""
    rows = [blk for _, blk in xi_sums(a0, deltas, table, start, stop, chunk)]
    return np.concatenate(rows, axis=0)


# ------------------------------------------------------------------ diagnostics


@dataclass
class VarianceLinearity:
    k: int
    ns: np.ndarray
    deviation: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_ci: tuple


def variance_deviation(xis, n):
    """|E((sum of the first n rows)^2) - n| and its standard error."""
    s = xis[:n].sum(axis=0)
    sq = s * s
    return abs(float(sq.mean()) - n), float(sq.std(ddof=1) / math.sqrt(len(sq)))


def variance_linearity(k, n, xis=None, harness=None, a0=None, deltas=None, table=None):
    """|E((xi_k + ... + xi_{k+n-1})^2) - n| over sampled kept parameters.

    ``xis`` holds xi_k, xi_{k+1}, ... as rows.  Raises GateViolated when n
    exceeds eta k / 2.
    """
    if harness is not None and n > harness.max_n(k):
        raise GateViolated(f"n = {n} exceeds eta k / 2 = {harness.eta * k / 2:.3g}")
    if n < 1:
        raise GateViolated("n must be >= 1")
    if xis is None:
        xis = xi_matrix(a0, deltas, table, k, k + n - 1)
    return variance_deviation(xis, n)


def variance_linearity_scan(k, xis, n_max, boot=200, seed=0):
    """Deviation for n = 1..n_max with an OLS slope and bootstrap interval."""
    ns = np.arange(1, n_max + 1)
    dev = np.empty(n_max)
    se = np.empty(n_max)
    for t, n in enumerate(ns):
        dev[t], se[t] = variance_deviation(xis, n)
    if n_max < 2:
        return VarianceLinearity(k, ns, dev, se, math.nan, (math.nan, math.nan))
    slope = float(np.polyfit(ns, dev, 1)[0])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))
    cs = np.cumsum(xis[:n_max], axis=0)
    m = xis.shape[1]
    bs = []
    for _ in range(boot):
        idx = rng.integers(0, m, m)
        d = np.abs(np.mean(cs[:, idx] ** 2, axis=1) - ns)
        bs.append(np.polyfit(ns, d, 1)[0])
    ci = (float(np.percentile(bs, 2.5)), float(np.percentile(bs, 97.5)))
    return VarianceLinearity(k, ns, dev, se, slope, ci)


def local_variance_gate(k, n, image_length, harness, depth):
    """Check the gate of the local estimate for an interval of P_{v(k)}."""
    v = int(math.floor(k - k ** 0.25))
    if v > depth:
        raise GateViolated(f"v(k) = {v} exceeds the construction depth {depth}")
    lo = harness.lambda0 ** (-k ** 0.25)
    hi = float(n) ** (-3.0 / harness.alpha)
    if not (lo <= image_length <= hi):
        raise GateViolated(f"|x_v(omega)| = {image_length:.3g} outside [{lo:.3g}, {hi:.3g}]")
    return v


def lln_exponents(block_sums, scheme, N_grid):
    """Per sample: slope of log|N - sum_{j <= M(N)} y_j^2| against log N.

    ``block_sums`` has shape (n_blocks, n_samples).
    """
    N_grid = np.asarray(N_grid)
    M = scheme.block_of_many(N_grid)
    if M.max() > block_sums.shape[0]:
        raise ValueError("block sums do not reach block_of(max N)")
    cs = np.cumsum(block_sums ** 2, axis=0)
    S = cs[M - 1]
    resid = np.abs(N_grid[:, None] - S)
    out = np.empty(block_sums.shape[1])
    x = np.log(N_grid)
    for s in range(block_sums.shape[1]):
        r = resid[:, s]
        ok = r > 0
        if ok.sum() < 2:
            out[s] = -math.inf
            continue
        out[s] = np.polyfit(x[ok], np.log(r[ok]), 1)[0]
    return out


def lln_check(block_sums, scheme, N_grid):
    """Fitted LLN exponents for each sample (see lln_exponents)."""
    return lln_exponents(block_sums, scheme, N_grid)


def block_sums_from_xis(xis, scheme, n_blocks):
    """w_j = sum_{i in I_j} xi_i from rows xi_1, xi_2, ..."""
    out = np.zeros((n_blocks, xis.shape[1]))
    for j in range(1, n_blocks + 1):
        b = scheme.block(j)
        out[j - 1] = xis[b.start - 1: b.stop - 1].sum(axis=0)
    return out


@dataclass
class CLTResult:
    N: int
    ks: float
    p_value: float
    values: np.ndarray


def clt_test(sums, N):
    """KS distance of N^{-1/2} * sums against the standard normal."""
    sums = np.asarray(sums, dtype=float)
    z = sums / math.sqrt(N) if N > 0 else np.zeros_like(sums)
    res = sps.kstest(z, "norm")
    return CLTResult(N, float(res.statistic), float(res.pvalue), z)


def lil_trajectory(xis, start=3):
    """S_n / sqrt(2 n log log n) for n >= start and its running maximum."""
    s = np.cumsum(np.asarray(xis, dtype=float))
    n = np.arange(1, len(s) + 1, dtype=float)
    keep = n >= max(start, 3)
    n, s = n[keep], s[keep]
    v = s / np.sqrt(2 * n * np.log(np.log(n)))
    return n.astype(np.int64), v, np.maximum.accumulate(v)


def lil_diagnostic(a, N_max, nphi, a0=None):
    """LIL trajectory at one parameter for n = 3..N_max."""
    if N_max < 100:
        raise ValueError("N_max must be >= 100")
    if a0 is None:
        a0, a = float(a), 0.0
    stream = OrbitStream(a0, np.array([a]))
    parts = []
    left = N_max
    while left > 0:
        s = min(4096, left)
        parts.append(stream.next(s)[:, 0])
        left -= s
    x = np.concatenate(parts)
    return lil_trajectory(nphi(x))
