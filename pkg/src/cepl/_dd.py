"""Double-double arithmetic and batched orbit kernels.

A double-double value is an unevaluated sum ``hi + lo`` of two floats with
``|lo| <= ulp(hi)/2``, giving roughly 106 bits of precision.  Parameters are
handled as ``a = a0 + delta`` with both terms plain floats, which is exact as a
double-double.  All kernels are compiled without fastmath so that the error-free
transformations stay exact.
"""

import numpy as np
from numba import njit

_SPLIT = 134217729.0  # 2**27 + 1


@njit(cache=True, inline="always")
def two_sum(a, b):
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


@njit(cache=True, inline="always")
def quick_two_sum(a, b):
    s = a + b
    e = b - (s - a)
    return s, e


@njit(cache=True, inline="always")
def split(a):
    t = _SPLIT * a
    hi = t - (t - a)
    return hi, a - hi


@njit(cache=True, inline="always")
def two_prod(a, b):
    p = a * b
    ah, al = split(a)
    bh, bl = split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


@njit(cache=True, inline="always")
def dd_add(ah, al, bh, bl):
    s, e = two_sum(ah, bh)
    t, f = two_sum(al, bl)
    e += t
    s, e = quick_two_sum(s, e)
    e += f
    return quick_two_sum(s, e)


@njit(cache=True, inline="always")
def dd_mul(ah, al, bh, bl):
    p, e = two_prod(ah, bh)
    e += ah * bl + al * bh
    return quick_two_sum(p, e)


@njit(cache=True, inline="always")
def dd_step(ah, al, xh, xl):
    """One application of T_a in double-double."""
    th, tl = dd_add(1.0, 0.0, -xh, -xl)
    uh, ul = dd_mul(xh, xl, th, tl)
    return dd_mul(ah, al, uh, ul)


@njit(cache=True, inline="always")
def dd_dist_c(xh, xl):
    """x - 1/2 rounded to a float (accurate even when x is very close to 1/2)."""
    return (xh - 0.5) + xl


@njit(cache=True)
def critical_orbit_dd(a0, delta, n):
    """Critical orbit x_0..x_n with running derivative data for one parameter.

    Returns (xh, xl, dist, logd, sgn, z) where logd[k] = log|(T^k)'(x_0)|,
    sgn[k] its sign, and z[k] = x'_k / (T^k)'(x_0) (the transversality ratio).
    """
    ah, al = two_sum(a0, delta)
    xh = np.empty(n + 1)
    xl = np.empty(n + 1)
    dist = np.empty(n + 1)
    logd = np.empty(n + 1)
    sgn = np.empty(n + 1)
    z = np.empty(n + 1)
    # x_0 = a/4 exactly (scaling by a power of two)
    h, l = ah * 0.25, al * 0.25
    logd[0] = 0.0
    sgn[0] = 1.0
    z[0] = 0.25
    for k in range(n + 1):
        xh[k] = h
        xl[k] = l
        d = dd_dist_c(h, l)
        dist[k] = d
        if k == n:
            break
        # T'(x) = -2a(x - c)
        fac = -2.0 * ah * d
        if fac == 0.0:
            logd[k + 1] = -np.inf
            sgn[k + 1] = 0.0
            z[k + 1] = np.nan
        else:
            logd[k + 1] = logd[k] + np.log(abs(fac))
            sgn[k + 1] = sgn[k] * (1.0 if fac > 0 else -1.0)
            # z_{k+1} = z_k + x_k(1 - x_k) / (T^{k+1})'(x_0)
            z[k + 1] = z[k] + sgn[k + 1] * h * (1.0 - h) * np.exp(-logd[k + 1])
        h, l = dd_step(ah, al, h, l)
    return xh, xl, dist, logd, sgn, z


@njit(cache=True)
def batch_orbit(a0, deltas, n):
    """Critical orbit data for many parameters a0 + deltas[i], depth n.

    Returns arrays of shape (len(deltas), n + 1): xh, dist, logd, sgn, z.
    """
    m = deltas.shape[0]
    XH = np.empty((m, n + 1))
    DI = np.empty((m, n + 1))
    LD = np.empty((m, n + 1))
    SG = np.empty((m, n + 1))
    Z = np.empty((m, n + 1))
    for i in range(m):
        xh, xl, dist, logd, sgn, z = critical_orbit_dd(a0, deltas[i], n)
        XH[i] = xh
        DI[i] = dist
        LD[i] = logd
        SG[i] = sgn
        Z[i] = z
    return XH, DI, LD, SG, Z


@njit(cache=True)
def batch_point(a0, deltas, k):
    """x_k(a0 + delta) as (hi, lo) pairs for each delta."""
    m = deltas.shape[0]
    H = np.empty(m)
    L = np.empty(m)
    for i in range(m):
        ah, al = two_sum(a0, deltas[i])
        h, l = ah * 0.25, al * 0.25
        for _ in range(k):
            h, l = dd_step(ah, al, h, l)
        H[i] = h
        L[i] = l
    return H, L


@njit(cache=True)
def batch_pullback(a0, lo, hi, targets, k, orient, tol):
    """Solve x_k(a0 + d) = target for d in [lo, hi] by bisection.

    ``orient`` is +1 if x_k increases on the bracket and -1 otherwise.  The
    returned d is the left end of the final bracket, so points equal to the
    target go to the left piece.
    """
    m = targets.shape[0]
    out = np.empty(m)
    for i in range(m):
        l = lo[i]
        r = hi[i]
        t = targets[i]
        s = orient[i]
        while r - l > tol[i]:
            mid = l + 0.5 * (r - l)
            if mid <= l or mid >= r:
                break
            ah, al = two_sum(a0, mid)
            h, lw = ah * 0.25, al * 0.25
            for _ in range(k):
                h, lw = dd_step(ah, al, h, lw)
            f = s * ((h - t) + lw)
            if f > 0.0:
                r = mid
            else:
                l = mid
        out[i] = l
    return out


@njit(cache=True)
def batch_binding(a0, deltas, r, nu, beta, p_max, lam):
    """Binding time for each (delta, r, nu).

    Largest p <= p_max with max_s |T^i(x_s) - T^{i+nu}(c)| + lam^i |U_r| <= e^{-i beta}
    for 1 <= i <= p, where x_s runs over c - e^{-r}, c, c + e^{-r}.
    """
    m = deltas.shape[0]
    out = np.zeros(m, dtype=np.int64)
    for q in range(m):
        ah, al = two_sum(a0, deltas[q])
        er = np.exp(-float(r[q]))
        width = 2.0 * er
        # critical orbit T^{nu}(c) as the reference point
        ch, cl = 0.5, 0.0
        for _ in range(nu[q]):
            ch, cl = dd_step(ah, al, ch, cl)
        s0h, s0l = 0.5, -er
        s1h, s1l = 0.5, 0.0
        s2h, s2l = 0.5, er
        s0h, s0l = quick_two_sum(s0h, s0l)
        s2h, s2l = quick_two_sum(s2h, s2l)
        p = 0
        margin = width
        for i in range(1, p_max + 1):
            ch, cl = dd_step(ah, al, ch, cl)
            s0h, s0l = dd_step(ah, al, s0h, s0l)
            s1h, s1l = dd_step(ah, al, s1h, s1l)
            s2h, s2l = dd_step(ah, al, s2h, s2l)
            margin *= lam
            d0 = abs((s0h - ch) + (s0l - cl))
            d1 = abs((s1h - ch) + (s1l - cl))
            d2 = abs((s2h - ch) + (s2l - cl))
            worst = max(d0, max(d1, d2)) + margin
            if worst <= np.exp(-i * beta):
                p = i
            else:
                break
        out[q] = p
    return out


@njit(cache=True)
def iterate_dd(a, x0, n):
    """Orbit x0, T_a x0, ..., T_a^n x0 in double-double, returned as (hi, lo)."""
    H = np.empty(n + 1)
    L = np.empty(n + 1)
    h, l = x0, 0.0
    for k in range(n + 1):
        H[k] = h
        L[k] = l
        if k < n:
            h, l = dd_step(a, 0.0, h, l)
    return H, L


@njit(cache=True)
def critical_orbit_f64(a, n):
    """Plain double version of critical_orbit_dd (no compensated terms)."""
    x = np.empty(n + 1)
    logd = np.empty(n + 1)
    sgn = np.empty(n + 1)
    z = np.empty(n + 1)
    h = 0.25 * a
    logd[0] = 0.0
    sgn[0] = 1.0
    z[0] = 0.25
    for k in range(n + 1):
        x[k] = h
        if k == n:
            break
        fac = a * (1.0 - 2.0 * h)
        if fac == 0.0:
            logd[k + 1] = -np.inf
            sgn[k + 1] = 0.0
            z[k + 1] = np.nan
        else:
            logd[k + 1] = logd[k] + np.log(abs(fac))
            sgn[k + 1] = sgn[k] * (1.0 if fac > 0 else -1.0)
            z[k + 1] = z[k] + sgn[k + 1] * h * (1.0 - h) * np.exp(-logd[k + 1])
        h = a * h * (1.0 - h)
    return x, logd, sgn, z
