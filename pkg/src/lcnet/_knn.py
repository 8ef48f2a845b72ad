"""Compiled kernels for max-norm neighbor statistics.

The surrogate kernel answers the question "what are the KSG neighbor counts if
x is replaced by a rearrangement of itself" without rebuilding any tree. It
walks precomputed candidate lists, sorted by distance in the (y, z) and z
subspaces, and stops as soon as the remaining candidates cannot matter. Rows
whose answer lies beyond the candidate list fall back to an exhaustive scan, so
the counts are always exact.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _maxdist(a, i, j):
    d = 0.0
    for c in range(a.shape[1]):
        v = abs(a[i, c] - a[j, c])
        if v > d:
            d = v
    return d


@njit(cache=True)
def _push(best, filled, k, d):
    # best[:filled] is ascending; keep the k smallest values seen.
    if filled == k:
        if d >= best[k - 1]:
            return filled
        pos = k - 1
    else:
        pos = filled
        filled += 1
    while pos > 0 and best[pos - 1] > d:
        best[pos] = best[pos - 1]
        pos -= 1
    best[pos] = d
    return filled


@njit(cache=True)
def _count_below(sorted_vals, eps):
    # number of leading entries strictly below eps
    lo = 0
    hi = sorted_vals.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if sorted_vals[mid] < eps:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def surrogate_counts(x, yz, z, yz_nbr, yz_dist, z_nbr, z_dist, k):
    """Exact KSG counts (self included) for a candidate x against fixed (y, z).

    Parameters
    ----------
    x : (n,) float64
    yz : (n, 1 + d_z) float64
    z : (n, d_z) float64
    yz_nbr, z_nbr : (n, L) int64
        Row i lists the L nearest points to i in the respective subspace,
        ascending by max-norm distance; ``yz_dist`` and ``z_dist`` hold those
        distances.
    k : int

    Returns
    -------
    eps, k_z, k_xz, k_yz
    """
    n = x.shape[0]
    l_yz = yz_nbr.shape[1]
    l_z = z_nbr.shape[1]
    eps_out = np.empty(n)
    k_z = np.empty(n, np.int64)
    k_xz = np.empty(n, np.int64)
    k_yz = np.empty(n, np.int64)
    best = np.empty(k)

    for i in range(n):
        xi = x[i]
        filled = 0
        settled = False
        for m in range(l_yz):
            j = yz_nbr[i, m]
            if j == i:
                continue
            d_yz = yz_dist[i, m]
            if filled == k and d_yz >= best[k - 1]:
                settled = True
                break
            d = abs(xi - x[j])
            if d_yz > d:
                d = d_yz
            filled = _push(best, filled, k, d)
        if not settled and l_yz < n:
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                d = abs(xi - x[j])
                d_yz = _maxdist(yz, i, j)
                if d_yz > d:
                    d = d_yz
                filled = _push(best, filled, k, d)
        eps = best[k - 1]
        eps_out[i] = eps

        count = _count_below(yz_dist[i], eps)
        if count == l_yz and l_yz < n:
            count = 0
            for j in range(n):
                if _maxdist(yz, i, j) < eps:
                    count += 1
        k_yz[i] = count

        count = _count_below(z_dist[i], eps)
        count_x = 0
        if count == l_z and l_z < n:
            count = 0
            for j in range(n):
                if _maxdist(z, i, j) < eps:
                    count += 1
                    if abs(xi - x[j]) < eps:
                        count_x += 1
        else:
            for m in range(count):
                if abs(xi - x[z_nbr[i, m]]) < eps:
                    count_x += 1
        k_z[i] = count
        k_xz[i] = count_x
    return eps_out, k_z, k_xz, k_yz


@njit(cache=True)
def surrogate_counts_1d(x, y, z, order, k):
    """Same contract as :func:`surrogate_counts` for a single conditioning column.

    ``order`` sorts z ascending. Neighborhoods in z are then contiguous runs of
    the sorted arrays, so every search is a scan outward from the point.
    """
    n = x.shape[0]
    xs = np.empty(n)
    ys = np.empty(n)
    zs = np.empty(n)
    for p in range(n):
        xs[p] = x[order[p]]
        ys[p] = y[order[p]]
        zs[p] = z[order[p]]
    eps_out = np.empty(n)
    k_z = np.empty(n, np.int64)
    k_xz = np.empty(n, np.int64)
    k_yz = np.empty(n, np.int64)
    best = np.empty(k)

    for p in range(n):
        xp = xs[p]
        yp = ys[p]
        zp = zs[p]
        filled = 0
        # a few sorted neighbors on each side give an early bound, after which
        # each side is a plain scan that stops once the z gap alone exceeds it
        lo = max(0, p - 2 * k)
        hi = min(n - 1, p + 2 * k)
        for q in range(lo, hi + 1):
            if q == p:
                continue
            d = max(abs(xs[q] - xp), abs(ys[q] - yp), abs(zs[q] - zp))
            if filled < k or d < best[k - 1]:
                filled = _push(best, filled, k, d)
        q = lo - 1
        while q >= 0:
            d_z = zp - zs[q]
            if filled == k and d_z >= best[k - 1]:
                break
            d = max(abs(xs[q] - xp), abs(ys[q] - yp), d_z)
            if filled < k or d < best[k - 1]:
                filled = _push(best, filled, k, d)
            q -= 1
        q = hi + 1
        while q < n:
            d_z = zs[q] - zp
            if filled == k and d_z >= best[k - 1]:
                break
            d = max(abs(xs[q] - xp), abs(ys[q] - yp), d_z)
            if filled < k or d < best[k - 1]:
                filled = _push(best, filled, k, d)
            q += 1
        eps = best[k - 1]

        # one outward pass over the z-window counts all three subspaces
        cz = 1
        cxz = 1
        cyz = 1
        q = p - 1
        while q >= 0 and zp - zs[q] < eps:
            cz += 1
            cxz += abs(xs[q] - xp) < eps
            cyz += abs(ys[q] - yp) < eps
            q -= 1
        q = p + 1
        while q < n and zs[q] - zp < eps:
            cz += 1
            cxz += abs(xs[q] - xp) < eps
            cyz += abs(ys[q] - yp) < eps
            q += 1
        i = order[p]
        eps_out[i] = eps
        k_z[i] = cz
        k_xz[i] = cxz
        k_yz[i] = cyz
    return eps_out, k_z, k_xz, k_yz


@njit(cache=True)
def greedy_local_assignment(candidates, order):
    """Assign each row a donor from its candidate list, never reusing a donor.

    Rows are visited in ``order``; each takes its first unused candidate.
    Rows that find every candidate taken get -1.
    """
    n, width = candidates.shape
    used = np.zeros(n, np.bool_)
    donor = np.full(n, -1, np.int64)
    for idx in range(n):
        i = order[idx]
        for m in range(width):
            j = candidates[i, m]
            if not used[j]:
                used[j] = True
                donor[i] = j
                break
    return donor
