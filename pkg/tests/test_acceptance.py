"""Acceptance criteria 1-11, each printing one PASS/FAIL line.

Criteria that the implementation cannot meet are left failing; the blocking
analysis lives in the decisions ledger, not here.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from cepl import _dd, asip, io, orbit
from cepl import partition as P
from cepl import stats as S
from cepl.cli import main

from bruteforce import classify, grid


@pytest.fixture
def verdict(capsys):
    def emit(num, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {num:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1

def _fd(a, n, h):
    H, L = _dd.batch_point(a, np.array([h, -h]), n)
    return ((H[0] - H[1]) + (L[0] - L[1])) / (2 * h)


def _ladder_fd(a, n):
    """Centered difference at the largest step h = 1e-7 / 10^k that agrees
    with the step h / 10 to 1e-6 (truncation error no longer visible)."""
    prev = _fd(a, n, 1e-7)
    for k in range(1, 10):
        h = 1e-7 * 10.0 ** -k
        cur = _fd(a, n, h)
        if abs(prev - cur) <= 1e-6 * abs(cur):
            return prev, 10 * h
        prev = cur
    return prev, h


def test_c01_derivative_recursion(verdict):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a = float(4.0 - rng.uniform(0, 2.0))
        n = int(rng.integers(1, 41))
        d = orbit.critical_orbit(a, n, orbit.PrecisionConfig("extended")).param_deriv[n]
        fd, _ = _ladder_fd(a, n)
        worst = max(worst, abs(fd - d) / abs(d))
    dt = time.perf_counter() - t
    verdict(1, worst < 1e-4 and dt < 5, f"max relative error {worst:.2e} over 100 pairs, {dt:.1f} s")


# ---------------------------------------------------------------- 2

def test_c02_lipschitz_sweep(verdict):
    rng = np.random.default_rng(7)
    t = time.perf_counter()
    bad = 0
    for _ in range(10**5):
        a1, a2 = rng.uniform(2.0, 4.0, 2)
        x = rng.uniform()
        n = int(rng.integers(1, 21))
        bad += not orbit.parameter_lipschitz_check(a1, a2, x, n, slack=1e-12)[2]
    dt = time.perf_counter() - t
    verdict(2, bad == 0 and dt < 10, f"{bad} violations in 1e5 tuples, {dt:.1f} s")


# ---------------------------------------------------------------- 3

def test_c03_chebyshev_oracles(verdict):
    t = time.perf_counter()
    x = S.critical_orbit_sample(4.0, 10**7, 10**4, seed=3)
    est = S.variance(4.0, S.Observable("x"), k_max=30, orbit=x)
    acim = S.estimate_acim(4.0, bins=200, orbit=x)
    l1 = float(np.abs(acim.histogram * np.diff(acim.edges) - S.chebyshev_bin_masses(acim.edges)).sum())
    dt = time.perf_counter() - t
    ok = abs(est.sigma2 - 0.125) <= 0.003 and l1 < 0.02 and dt < 60
    verdict(3, ok, f"sigma2 {est.sigma2:.5f}, L1 {l1:.5f}, {dt:.1f} s")


# ---------------------------------------------------------------- 4, 6

@pytest.fixture(scope="module")
def deep():
    cfg = P.ConstructionConfig()
    t = time.perf_counter()
    part = P.build_partition(cfg)
    return part, time.perf_counter() - t


def test_c04_construction_regression(deep, verdict):
    part, dt = deep
    cfg = part.config
    assert (cfg.epsilon, cfg.kappa0, cfg.d1, cfg.max_depth, cfg.lambda_ce, cfg.kappa1) == \
        (1e-4, 9.0, 0.34, 40, 1.5, 10.0)
    assert str(cfg.a_star).startswith("3.678573510")
    leaves = part.deepest.intervals
    lo = np.array([iv.lo for iv in leaves])
    hi = np.array([iv.hi for iv in leaves])
    frac = part.deepest.retained_measure / (2 * cfg.epsilon)
    # kept parameters: both endpoints of every leaf plus 20000 drawn by measure
    deltas = np.concatenate([lo, hi, asip.sample_parameters((lo, hi), 20000, seed=11)])
    _, DI, LD, _, _ = _dd.batch_orbit(cfg.a_star, deltas, cfg.max_depth)
    n = np.arange(cfg.N0, cfg.max_depth + 1)
    ce = np.min(LD[:, n] - n * math.log(cfg.lambda_ce))
    pol = np.min(np.log(np.abs(DI[:, n])) + cfg.kappa0 * np.log(n))
    # the small-image bound is claimed from level N1 (>= N0) on
    small = sum(len(P.no_small_image_check(lev, cfg).violations)
                for lev in part.levels if lev.level >= cfg.n1)
    cons = P.conservation_error(part)
    parts = {
        "a": (frac >= 0.5, f"retained {frac:.4f}"),
        "b": (ce >= 0, f"min CE margin {ce:.3g}"),
        "c": (pol > 0, f"min approach margin {pol:.3g}"),
        "d": (small == 0, f"{small} small-image violations"),
        "e": (cons <= 1e-13, f"conservation error {cons:.2e}"),
        "t": (dt < 600, f"{dt:.0f} s"),
    }
    ok = all(v[0] for v in parts.values())
    detail = "; ".join(f"({k}) {'ok' if v[0] else 'FAIL'} {v[1]}" for k, v in parts.items())
    verdict(4, ok, detail)


def test_c06_distortion(deep, verdict):
    part, _ = deep
    alpha = 3.0 / 43.0
    worst = 0.0
    C = {}
    for j in range(20, 41):
        ivs = part.levels[j].intervals
        step = max(1, len(ivs) // 200)
        cj = 1.0
        for iv in ivs[::step]:
            res = P.distortion_check(iv, j, alpha)
            worst = max(worst, res.max_ratio)
            cj = max(cj, res.band[1], 1.0 / res.band[0])
        C[j] = cj
    vals = np.array(list(C.values()))
    spread = float(np.max(np.abs(vals / vals.mean() - 1)))
    ok = worst <= 10 and spread <= 0.2
    verdict(6, ok, f"max pairwise ratio {worst:.3f}; realized C {vals.min():.3f}..{vals.max():.3f} "
                   f"(spread {100 * spread:.1f}% about the mean)")


# ---------------------------------------------------------------- 5

def test_c05_bruteforce_oracle(verdict):
    t = time.perf_counter()
    cfg = P.ConstructionConfig(epsilon=1e-2, r0=4, N0=3, lambda_ce=1.2, max_depth=12)
    part = P.build_partition(cfg)
    g, h = grid(cfg.a_star, cfg.epsilon, 10**5)
    ok = classify(g, cfg.N0, cfg.max_depth, cfg.lambda_ce, cfg.kappa0)
    lo = np.array([iv.left for iv in part.deepest.intervals])
    hi = np.array([iv.right for iv in part.deepest.intervals])
    k = np.searchsorted(lo, g, side="right") - 1
    inside = (k >= 0) & (g <= hi[np.maximum(k, 0)])
    edges = np.concatenate([lo, hi])
    bad = g[ok != inside]
    far = int(sum(np.min(np.abs(edges - x)) > h for x in bad))
    dt = time.perf_counter() - t
    verdict(5, far == 0 and dt < 120,
            f"{len(bad)} grid mismatches, {far} farther than one grid cell from a boundary, {dt:.1f} s")


# ---------------------------------------------------------------- 7

def test_c07_block_scheme(verdict):
    t = time.perf_counter()
    listing = {1: 1, 2: 2, 3: 3, 4: 3, 5: 4, 6: 4, 7: 5, 8: 5, 9: 6, 10: 6, 11: 6,
               12: 7, 13: 7, 14: 7, 15: 8, 16: 8, 17: 8, 18: 8, 19: 9, 20: 9, 21: 9, 22: 9}
    exact = all(asip.block_of(N) == M for N, M in listing.items())
    scheme = asip.BlockScheme()
    N = np.arange(1, 10**6 + 1)
    ratio = scheme.block_of_many(N) / N ** 0.6
    dt = time.perf_counter() - t
    ok = exact and ratio.min() >= 1 / 3 and ratio.max() <= 3 and dt < 5
    verdict(7, ok, f"listing {'matches' if exact else 'differs'}; M(N)/N^0.6 in "
                   f"[{ratio.min():.3f}, {ratio.max():.3f}]; {dt:.1f} s")


# ---------------------------------------------------------------- 8-11

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cfg = base / "default.json"
    cfg.write_text("{}")
    outs = []
    for name in ("run1", "run2"):
        out = str(base / name)
        rc = main(["run", "--config", str(cfg), "--out", out])
        assert rc == 0
        outs.append(out)
    return outs


def test_c08_martingale(pipeline, verdict):
    out = pipeline[0]
    summ = io.read_json(os.path.join(out, "asip.json"))
    rows = io.read_csv(os.path.join(out, "martingale.csv"))[1]
    z = np.array([float(r["z"]) for r in rows])
    bad = [int(r["j"]) for r in rows if float(r["z"]) > 3]
    tele = summ["telescoping_error"]
    ok = tele <= 1e-12 and len(z) == 50 and not bad
    verdict(8, ok, f"telescoping error {tele:.2e}; |E(Y_j|L_(j-1))| / se max {z.max():.2f}, "
                   f"blocks above 3: {bad}")


def test_c09_variance_linearity(pipeline, verdict):
    summ = io.read_json(os.path.join(pipeline[0], "asip.json"))
    vl = summ["variance_linearity"]
    msgs, ok = [], True
    for k in ("200", "400"):
        r = vl[k]
        w = r["window_n_max"]
        lo, hi = r["slope_ci"]
        good = w >= 2 and r["slope"] < 0.1
        ok &= good
        msgs.append(f"k={k}: window n <= {w}, slope {r['slope']} CI [{lo}, {hi}] "
                    f"(n <= {r['supplementary_n_max']}: {r['supplementary_slope']:.4f} "
                    f"CI [{r['supplementary_slope_ci'][0]:.4f}, {r['supplementary_slope_ci'][1]:.4f}])")
    verdict(9, ok, f"eta = {summ['eta']:.3g}; " + "; ".join(msgs))


def test_c10_clt(pipeline, verdict):
    out = pipeline[0]
    summ = io.read_json(os.path.join(out, "asip.json"))
    t = json.loads(open(os.path.join(out, "timings.json")).read())["wall_clock_seconds"]
    ks = summ["ks"]["5000"]
    n = len(io.read_csv(os.path.join(out, "clt_values.csv"))[1])
    total = sum(t.values())
    ok = ks < 0.08 and n >= 2000 and total < 900
    verdict(10, ok, f"KS {ks:.4f} at N=5000 over {n} parameters; pipeline {total:.0f} s")


def test_c11_determinism(pipeline, verdict):
    a, b = pipeline
    diff, count = [], 0
    for dp, _, names in os.walk(a):
        for name in names:
            if name == "timings.json":
                continue
            p = os.path.join(dp, name)
            q = os.path.join(b, os.path.relpath(p, a))
            count += 1
            if not os.path.exists(q) or open(p, "rb").read() != open(q, "rb").read():
                diff.append(os.path.relpath(p, a))
    verdict(11, not diff and count > 20,
            f"{count} files compared (wall-clock timings excluded), {len(diff)} differ {diff}")
