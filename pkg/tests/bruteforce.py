"""Independent pointwise classifier for shallow constructions.

Plain float64 numpy, no shared code with the package.  A parameter a survives
to depth D when, for every N0 <= n <= D,

    |(T_a^n)'(x_0)| >= lambda^n   and   |x_n - 1/2| > n^{-kappa0},

where x_n = T_a^{n+1}(1/2).  When kappa0 * log(N0) > r0 the exclusion of deep
returns (host r >= kappa0 log(j-1)) implies the second inequality, so these two
conditions characterize the kept set pointwise.
"""

import numpy as np


def classify(a, N0, depth, lam, kappa0):
    a = np.asarray(a, dtype=float)
    x = a / 4.0
    logd = np.zeros_like(a)
    ok = np.ones(a.shape, dtype=bool)
    for n in range(depth + 1):
        if n >= N0:
            ok &= logd >= n * np.log(lam)
            ok &= np.abs(x - 0.5) > float(n) ** (-kappa0)
        logd = logd + np.log(np.abs(a * (1.0 - 2.0 * x)))
        x = a * x * (1.0 - x)
    return ok


def grid(a_star, eps, n):
    """n midpoints of equal cells covering [a_star - eps, a_star + eps]."""
    h = 2 * eps / n
    return a_star - eps + h * (np.arange(n) + 0.5), h
