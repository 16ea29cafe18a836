import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cepl import _dd, io
from cepl import partition as P
from cepl.errors import AtCritical, ConfigError, RootTooWide

from bruteforce import classify, grid

SHALLOW = dict(epsilon=1e-2, r0=4, N0=3, lambda_ce=1.2, max_depth=12)


@pytest.fixture(scope="module")
def shallow():
    return P.build_partition(P.ConstructionConfig(**SHALLOW))


# ---------------------------------------------------------------- host cells

def test_host_interval_examples():
    h = P.host_interval(0.5 + math.exp(-5.5), 2)
    assert (h.side, h.r, h.ell) == ("plus", 5, 9)
    # recompute from the endpoint formulas
    off = (math.exp(-5.5) - math.exp(-6)) / ((math.exp(-5) - math.exp(-6)) / 25)
    assert h.ell == int(off)
    assert P.host_interval(0.9, 2).outside
    with pytest.raises(AtCritical):
        P.host_interval(0.5, 2)


@settings(max_examples=200)
@given(st.floats(1e-9, 0.49), st.booleans(), st.integers(2, 8))
def test_host_interval_contains_point(d, plus, r0):
    x = 0.5 + d if plus else 0.5 - d
    h = P.host_interval(x, r0)
    if h.outside:
        assert d >= math.exp(-r0)
        return
    lo, hi = P.cell_bounds(h.r, h.ell, h.side)
    assert 0 <= h.ell < h.r ** 2
    assert lo - 1e-15 <= x <= hi + 1e-15


def test_cells_tile_each_ring():
    r = 6
    edges = [P.cell_bounds(r, ell, "plus") for ell in range(r * r)]
    assert edges[0][0] == pytest.approx(0.5 + math.exp(-r - 1))
    assert edges[-1][1] == pytest.approx(0.5 + math.exp(-r))
    for (a, b), (c, d) in zip(edges, edges[1:]):
        assert b == pytest.approx(c)


# ---------------------------------------------------------------- binding

def test_binding_zero_when_first_step_fails():
    assert P.binding_time(P.A_STAR, 10, 20, 50.0, 100) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(9, 14), st.integers(16, 40), st.floats(0.05, 0.5), st.floats(0.05, 0.5))
def test_binding_nonincreasing_in_beta(r, nu, b1, b2):
    lo, hi = sorted((b1, b2))
    assert P.binding_time(P.A_STAR, r, nu, hi, 200) <= P.binding_time(P.A_STAR, r, nu, lo, 200)


def _grid_binding(a, r, nu, beta, p_max, m=1000):
    """Pointwise binding over a 1000-point grid on U_r, plain float64."""
    xs = 0.5 + np.linspace(-math.exp(-r), math.exp(-r), m)
    c = 0.5
    for _ in range(nu):
        c = a * c * (1 - c)
    p = 0
    for i in range(1, p_max + 1):
        xs = a * xs * (1 - xs)
        c = a * c * (1 - c)
        if np.max(np.abs(xs - c)) <= math.exp(-i * beta):
            p = i
        else:
            break
    return p


def test_binding_cross_check_and_reproducible(shallow):
    cfg = P.ConstructionConfig()
    ev = [e for iv in shallow.intervals for e in iv.history if e.kind == "essential" and not e.host.outside]
    assert ev
    r, nu = ev[0].host.r, ev[0].time
    p1 = P.binding_time(cfg.a_star, r, nu, cfg.beta_bc, cfg.p_max)
    p2 = P.binding_time(cfg.a_star, r, nu, cfg.beta_bc, cfg.p_max)
    assert p1 == p2
    # the Lipschitz margin makes the sampled binding conservative
    assert p1 <= _grid_binding(cfg.a_star, r, nu, cfg.beta_bc, cfg.p_max)
    for r in (9, 11, 13):
        for nu in (20, 30):
            assert P.binding_time(cfg.a_star, r, nu, 0.1, 200) <= _grid_binding(cfg.a_star, r, nu, 0.1, 200)


# ---------------------------------------------------------------- returns

def test_classify_return_none_far_from_c():
    cfg = P.ConstructionConfig()
    iv = P.ParamInterval(-1e-6, 1e-6, cfg.a_star, 0, P.HostIndex(7, 0, "outside"))
    # x_0 = a/4 is far from c
    assert P.classify_return(iv, 1, cfg) is None


def test_full_cell_tests():
    r0 = 4
    lo, hi = P.cell_bounds(5, 3, "plus")
    w = hi - lo
    assert P.contains_full_cell(lo - 0.01 * w, hi + 0.01 * w, r0)
    assert not P.contains_full_cell(lo + 0.1 * w, hi - 0.1 * w, r0)
    lo, hi = P.cell_bounds(5, 3, "minus")
    assert P.contains_full_cell(lo - 0.01 * w, hi + 0.01 * w, r0)
    assert P.contains_full_cell(0.49, 0.51, r0)


def test_classify_kinds_from_images():
    cfg = P.ConstructionConfig(r0=4)
    iv = P.ParamInterval(0.0, 1e-9, cfg.a_star, 0, P.HostIndex(3, 0, "outside"))
    lo, hi = P.cell_bounds(5, 3, "plus")
    w = hi - lo
    assert P.classify_return(iv, 20, cfg, y=(lo - 0.01 * w, hi + 0.01 * w)).kind == "essential"
    assert P.classify_return(iv, 20, cfg, y=(lo + 0.1 * w, hi - 0.1 * w)).kind == "inessential"
    assert P.classify_return(iv, 20, cfg, y=(0.9, 0.95)) is None
    iv.bound_until = 25
    assert P.classify_return(iv, 20, cfg, y=(lo, hi)).kind == "bound"


# ---------------------------------------------------------------- subdivision

def test_subdivide_single_host():
    lo, hi = P.cell_bounds(5, 3, "plus")
    pieces = P.phase_pieces(lo, hi, 4, 30)
    assert len(pieces) == 1
    assert pieces[0][3] == P.HostIndex(5, 3, "plus")


def test_subdivide_three_hosts():
    r0 = 4
    lo = P.cell_bounds(r0, 0, "plus")[0]
    hi = P.cell_bounds(r0, 2, "plus")[1]
    pieces = P.phase_pieces(lo, hi, r0, 30)
    assert [p[3].ell for p in pieces] == [0, 1, 2]
    assert all(p[2] == "cell" for p in pieces)


def test_subdivide_long_outside_component():
    r0 = 4
    u = math.exp(-r0)
    S = math.sqrt(2 * u)
    pieces = P.phase_pieces(0.5 - u, 0.5 + u + 1.5 * S, r0, 30)
    outs = [p for p in pieces if p[2] == "outside"]
    assert len(outs) == 2
    for p in outs:
        assert S / 2 <= p[1] - p[0] <= S
    cells = [p for p in pieces if p[2] != "outside"]
    assert cells
    # the pieces tile the image
    assert pieces[0][0] == 0.5 - u and pieces[-1][1] == 0.5 + u + 1.5 * S
    for a, b in zip(pieces, pieces[1:]):
        assert a[1] == b[0]


def test_subdivide_short_outside_joined():
    r0 = 4
    lo, hi = P.cell_bounds(r0, 5, "plus")
    u = math.exp(-r0)
    tiny = 0.1 * P.cell_width(r0)
    pieces = P.phase_pieces(lo, 0.5 + u + tiny, r0, 30)
    assert all(p[2] != "outside" for p in pieces)
    assert pieces[-1][1] == 0.5 + u + tiny


# ---------------------------------------------------------------- exclusion and e_j

def test_exclusion_rule_examples():
    assert P.discard_depth(101, 3) == pytest.approx(13.8155, abs=1e-4)
    assert P.exclusion_rule(P.HostIndex(14, 0, "plus"), 101, 3)
    assert not P.exclusion_rule(P.HostIndex(13, 0, "plus"), 101, 3)
    assert not P.exclusion_rule(P.HostIndex(7, 0, "outside"), 101, 3)
    assert P.exclusion_rule(P.HostIndex(2, 0, "minus"), 2, 3)


def test_tail_sum_example():
    e = P.tail_sums(3.0, 12)
    mpmath.mp.dps = 30
    ref = mpmath.zeta(3) - sum(mpmath.mpf(n) ** -3 for n in range(1, 10))
    assert e[10] == pytest.approx(float(ref), rel=1e-9)
    assert e[10] == pytest.approx(0.005525, abs=5e-7)
    assert np.all(np.diff(e[1:]) < 0)


# ---------------------------------------------------------------- construction

def test_config_validation_names_invariant():
    with pytest.raises(ConfigError, match="d1 \\* kappa0 >= 3"):
        P.ConstructionConfig(d1=0.3)
    with pytest.raises(ConfigError, match="beta_bc > alpha_bc"):
        P.ConstructionConfig(beta_bc=0.01)


def test_shallow_depth_single_interval():
    cfg = P.ConstructionConfig(max_depth=10)
    part = P.build_partition(cfg)
    assert len(part.levels) == 11
    for lev in part.levels:
        assert len(lev.intervals) == 1
        assert lev.retained_measure == 2 * cfg.epsilon
    assert all(r[4] for r in P.measure_report(part.levels, cfg))


def test_root_too_wide():
    with pytest.raises(RootTooWide):
        P.build_partition(P.ConstructionConfig(epsilon=0.05, max_depth=20))


def test_nesting_disjoint_sorted(shallow):
    levels = shallow.levels
    for lev in levels:
        lo = np.array([iv.lo for iv in lev.intervals])
        hi = np.array([iv.hi for iv in lev.intervals])
        assert np.all(hi > lo)
        assert np.all(lo[1:] >= hi[:-1])
        assert lev.retained_measure == pytest.approx(math.fsum(hi - lo), abs=0)
    for j in range(1, len(levels)):
        for l in range(j):
            plo = np.array([iv.lo for iv in levels[l].intervals])
            phi = np.array([iv.hi for iv in levels[l].intervals])
            for iv in levels[j].intervals:
                k = np.searchsorted(plo, iv.lo, side="right") - 1
                assert k >= 0 and iv.hi <= phi[k]


def test_conservation(shallow):
    assert P.conservation_error(shallow) <= 1e-15 * len(shallow.levels)


def test_monotone_images(shallow):
    cfg = shallow.config
    for lev in shallow.levels[cfg.N0 + 1:]:
        j = lev.level
        for iv in lev.intervals:
            s = iv.samples(cfg.samples_per_interval)
            _, _, _, SG, Z = _dd.batch_orbit(cfg.a_star, s, j)
            sg = SG[:, j] * np.sign(Z[:, j])
            assert np.all(sg == sg[0])


def test_free_returns_separated(shallow):
    for iv in shallow.deepest.intervals:
        free = [e for e in iv.history if e.kind in ("essential", "inessential") and not e.host.outside]
        for e1, e2 in zip(free, free[1:]):
            assert e2.time > e1.time + e1.binding_length + 1


def test_determinism(shallow):
    again = P.build_partition(shallow.config)
    a = [io.dumps(iv.to_dict()) for iv in shallow.intervals]
    b = [io.dumps(iv.to_dict()) for iv in again.intervals]
    assert a == b


def test_dump_reload_roundtrip(shallow):
    cfg = shallow.config
    ivs = [P.interval_from_dict(io.loads(io.dumps(iv.to_dict())), cfg.a_star) for iv in shallow.intervals]
    levels = P.levels_from_intervals(ivs, cfg)
    for a, b in zip(levels, shallow.levels):
        assert [i.uid for i in a.intervals] == [i.uid for i in b.intervals]
        assert a.retained_measure == b.retained_measure
        assert a.excluded_this_level == b.excluded_this_level


def test_oracle_equivalence_shallow(shallow):
    cfg = shallow.config
    g, h = grid(cfg.a_star, cfg.epsilon, 20_000)
    ok = classify(g, cfg.N0, cfg.max_depth, cfg.lambda_ce, cfg.kappa0)
    lo = np.array([iv.left for iv in shallow.deepest.intervals])
    hi = np.array([iv.right for iv in shallow.deepest.intervals])
    k = np.searchsorted(lo, g, side="right") - 1
    inside = (k >= 0) & (g <= hi[np.maximum(k, 0)])
    bad = g[ok != inside]
    edges = np.concatenate([lo, hi])
    for x in bad:
        assert np.min(np.abs(edges - x)) <= h


# ---------------------------------------------------------------- reports

def test_no_small_image_threshold():
    cfg = P.ConstructionConfig(kappa0=3.5, d1=0.9, kappa1=4.0)
    lev = P.PartitionLevel(20, [], 0.0, 0.0, 0.0)
    assert P.no_small_image_check(lev, cfg).threshold == pytest.approx(6.25e-6)


def test_no_small_image_on_shallow(shallow):
    for lev in shallow.levels[shallow.config.N0 + 1:]:
        assert not P.no_small_image_check(lev, shallow.config).violations


def test_distortion_examples():
    iv = P.ParamInterval(0.0, 0.0, 4.0, 2, P.HostIndex(3, 0, "outside"))
    res = P.distortion_check(iv, 2, 0.1)
    assert res.max_ratio == 1.0 and res.bound_ok
    assert res.band == (pytest.approx(1.0), pytest.approx(1.0))


def test_measure_report_rows(shallow):
    rows = P.measure_report(shallow.levels, shallow.config)
    assert [r[0] for r in rows] == list(range(shallow.config.max_depth + 1))
    assert all(r[4] for r in rows[: shallow.config.N0 + 1])
    e = [r[3] for r in rows]
    assert all(x > y for x, y in zip(e[1:], e[2:]))
