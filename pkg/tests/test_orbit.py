import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cepl import _dd, orbit
from cepl.errors import DegenerateDerivative, DomainError, NoSignChange, NotMisiurewicz
from cepl.orbit import PrecisionConfig


def test_iterate_examples():
    assert list(orbit.iterate(4, 0.5, 2)) == [0.5, 1.0, 0.0]
    assert list(orbit.iterate(2, 0.5, 3)) == [0.5] * 4
    assert list(orbit.iterate(3.5, 0.5, 1)) == [0.5, 0.875]


@pytest.mark.parametrize("a,x0,n", [(4.5, 0.5, 1), (0.0, 0.5, 1), (3.0, 1.5, 1), (3.0, -0.1, 1)])
def test_iterate_domain(a, x0, n):
    with pytest.raises(DomainError):
        orbit.iterate(a, x0, n)


@given(st.floats(0.01, 4.0), st.floats(0.0, 1.0), st.integers(0, 50))
def test_iterate_stays_in_unit_interval(a, x0, n):
    xs = orbit.iterate(a, x0, n)
    assert len(xs) == n + 1
    assert np.all((xs >= 0) & (xs <= 1))


def test_critical_orbit_at_4():
    tr = orbit.critical_orbit(4.0, 3)
    assert list(tr.points) == [1.0, 0.0, 0.0, 0.0]
    assert list(tr.param_deriv) == [0.25, -1.0, -4.0, -16.0]
    assert tr.log_deriv[0] == 0.0 and tr.signs[0] == 1
    assert tr.log_deriv[1] == pytest.approx(math.log(4))
    # (T^2)'(x_0) = T'(1) T'(0) = (-4)(4) = -16
    assert tr.log_deriv[2] == pytest.approx(math.log(16))
    assert tr.signs[2] == -1


def test_critical_orbit_flags_critical_hit():
    tr = orbit.critical_orbit(2.0, 3)
    assert 0 in tr.critical_hits
    assert tr.log_deriv[1] == -math.inf


def test_critical_orbit_promotes_deep_orbits():
    assert orbit.critical_orbit(3.9, 250).mode == "extended"
    assert orbit.critical_orbit(3.9, 50).mode == "standard"


def test_orbit_trace_json_roundtrip():
    import json
    d = json.loads(orbit.critical_orbit(3.7, 5).to_json())
    assert set(d) == {"a", "depth", "points", "log_deriv", "signs", "param_deriv"}
    assert len(d["points"]) == 6


def test_transversality_examples():
    z = orbit.transversality_ratio(4.0, 2)
    assert z[0] == pytest.approx(0.25)
    assert z[1] == pytest.approx(0.25)
    with pytest.raises(DegenerateDerivative):
        orbit.transversality_ratio(2.0, 3)


def test_transversality_matches_direct_ratio():
    a, n = 3.8, 20
    tr = orbit.critical_orbit(a, n, PrecisionConfig("extended"))
    z = orbit.transversality_ratio(a, n)
    direct = tr.param_deriv[1:] / (tr.signs[1:] * np.exp(tr.log_deriv[1:]))
    np.testing.assert_allclose(z, direct, rtol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(2.01, 4.0), st.integers(1, 300))
def test_log_product_consistency(a, n):
    tr = orbit.critical_orbit(a, n, PrecisionConfig("extended"))
    prod = 1.0
    for j in range(1, n + 1):
        prod *= a * (1 - 2 * tr.points[j - 1])
        if not np.isfinite(prod) or prod == 0 or abs(prod) < 1e-280 or abs(prod) > 1e280:
            break
        assert tr.signs[j] * math.exp(tr.log_deriv[j]) == pytest.approx(prod, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(2.01, 4.0), st.integers(1, 6))
def test_param_derivative_finite_difference(a, n):
    # with h = 1e-7 the centered difference is accurate while h |x'_n| stays small
    h = 1e-7
    tr = orbit.critical_orbit(a, n, PrecisionConfig("extended"))
    H, L = _dd.batch_point(a, np.array([h, -h]), n)
    fd = ((H[0] - H[1]) + (L[0] - L[1])) / (2 * h)
    assert fd == pytest.approx(tr.param_deriv[n], rel=1e-4, abs=1e-9)


def test_lipschitz_examples():
    lhs, rhs, ok = orbit.parameter_lipschitz_check(3.7, 3.7, 0.2, 5)
    assert lhs == 0 and ok
    lhs, rhs, ok = orbit.parameter_lipschitz_check(4.0, 3.9, 0.3, 1)
    assert lhs == pytest.approx(0.021)
    assert rhs == pytest.approx(4 / 3 * 4 * 0.1)
    assert ok


@settings(max_examples=200, deadline=None)
@given(st.floats(2.0001, 4.0), st.floats(2.0001, 4.0), st.floats(0, 1), st.integers(1, 20))
def test_lipschitz_property(a1, a2, x, n):
    assert orbit.parameter_lipschitz_check(a1, a2, x, n)[2]


def test_misiurewicz_default_root_and_oracle():
    root, dmin = orbit.find_misiurewicz()
    assert abs(orbit.misiurewicz_residual(root, 2)) < 1e-13
    assert dmin > 1e-6
    # independent high-precision bisection of x_2(a) = 1 - 1/a
    mpmath.mp.dps = 40

    def g(a):
        x = a / 4
        for _ in range(2):
            x = a * x * (1 - x)
        return x - (1 - 1 / a)

    ref = mpmath.findroot(g, (mpmath.mpf("3.6"), mpmath.mpf("3.7")), solver="bisect")
    assert abs(root - float(ref)) <= 2 * np.spacing(root)
    assert str(root).startswith("3.678573510")


def test_misiurewicz_zero_branch_at_4():
    root, _ = orbit.find_misiurewicz(k=1, bracket=(3.9, 4.0), branch="zero", probe=100)
    assert root == 4.0
    assert orbit.misiurewicz_residual(4.0, 1, "zero") == 0.0


def test_misiurewicz_errors():
    with pytest.raises(NoSignChange):
        orbit.find_misiurewicz(k=2, bracket=(3.0, 3.1))
    with pytest.raises(NotMisiurewicz):
        orbit.find_misiurewicz(k=1, bracket=(2.0, 2.5))


def test_precision_config_validation():
    with pytest.raises(DomainError):
        PrecisionConfig(mode="quad")
    with pytest.raises(DomainError):
        PrecisionConfig(comparison_slack=1e-3)


def test_map_params():
    m = orbit.MapParams(3.5)
    assert m.T(0.5) == 0.875 and m.dT(0.5) == 0.0
    with pytest.raises(DomainError):
        orbit.MapParams(1.5)


def test_dd_two_sum_exact():
    s, e = _dd.two_sum(1.0, 1e-20)
    assert s == 1.0 and e == 1e-20
