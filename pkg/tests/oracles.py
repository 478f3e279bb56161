"""Independent reference implementations used only to check the real ones."""

import math
import sys

import numpy as np


def flood_fill_components(mask, connectivity):
    """Recursive flood fill; partitions true cells into frozensets of (r, c)."""
    sys.setrecursionlimit(100_000)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        offsets = ((-1, 0), (1, 0), (0, -1), (0, 1))
    else:
        offsets = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
    seen = set()
    comps = []

    def grow(r, c, acc):
        acc.add((r, c))
        seen.add((r, c))
        for dr, dc in offsets:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and (nr, nc) not in seen:
                grow(nr, nc, acc)

    for i in range(h):
        for j in range(w):
            if mask[i, j] and (i, j) not in seen:
                acc = set()
                grow(i, j, acc)
                comps.append(frozenset(acc))
    return comps


def chi2_cdf(x, dof):
    """Regularized lower incomplete gamma via its power series (no scipy)."""
    if x <= 0:
        return 0.0
    s = dof / 2.0
    z = x / 2.0
    # P(s, z) = z^s e^-z / Gamma(s) * sum_n z^n / (s (s+1) ... (s+n))
    term = 1.0 / s
    total = term
    n = 0
    while True:
        n += 1
        term *= z / (s + n)
        total += term
        if term < total * 1e-16 or n > 10_000:
            break
    log_p = s * math.log(z) - z - math.lgamma(s) + math.log(total)
    return min(1.0, math.exp(log_p))


def chi2_quantile(dof, beta, tol=1e-10):
    """Bisection on the series CDF."""
    lo, hi = 0.0, 1.0
    while chi2_cdf(hi, dof) < beta:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < beta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def nearest_prototype_labels(points, prototypes):
    """Brute-force nearest assignment, one loop at a time."""
    labels = []
    for p in points:
        best, best_d = -1, float("inf")
        for i, c in enumerate(prototypes):
            d = float(np.sum((p - c) ** 2))
            if d < best_d:
                best, best_d = i, d
        labels.append(best)
    return np.array(labels)
