"""Compiled kernels for the honest split criterion and greedy tree growth.

All kernels work on a node's running sums of outcomes centered at the node mean:
per arm the count, the sum and the sum of squares.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TIE_RTOL = 1e-10


@njit(cache=True, nogil=True)
def leaf_contribution(n1, n0, s1, s0, q1, q0, n_tr, penalty):
    """One leaf's term of the criterion: -n * tau^2 / n_tr + penalty * (S1^2 / p + S0^2 / (1 - p))."""
    m1 = s1 / n1
    m0 = s0 / n0
    tau = m1 - m0
    v1 = (q1 - s1 * m1) / (n1 - 1.0)
    v0 = (q0 - s0 * m0) / (n0 - 1.0)
    if v1 < 0.0:
        v1 = 0.0
    if v0 < 0.0:
        v0 = 0.0
    n = n1 + n0
    p = n1 / n
    return -n * tau * tau / n_tr + penalty * (v1 / p + v0 / (1.0 - p))


@njit(cache=True, nogil=True)
def node_sums(y, d, rows, center):
    n1 = 0.0
    n0 = 0.0
    s1 = 0.0
    s0 = 0.0
    q1 = 0.0
    q0 = 0.0
    for r in rows:
        v = y[r] - center
        if d[r]:
            n1 += 1.0
            s1 += v
            q1 += v * v
        else:
            n0 += 1.0
            s0 += v
            q0 += v * v
    return n1, n0, s1, s0, q1, q0


@njit(cache=True, nogil=True)
def best_split(F, y, d, rows, features, n_tr, penalty, min_t, min_c):
    """Exhaustive search over ``features`` (ascending) and midpoints of distinct sorted values.

    Returns (feature, threshold, children criterion, parent criterion). feature is
    -1 when no candidate meets the floors; the parent criterion is NaN when the
    node itself has fewer than two units in an arm.
    """
    n = rows.shape[0]
    center = 0.0
    for r in rows:
        center += y[r]
    center /= max(n, 1)
    n1, n0, s1, s0, q1, q0 = node_sums(y, d, rows, center)
    parent = np.nan
    if n1 >= 2 and n0 >= 2:
        parent = leaf_contribution(n1, n0, s1, s0, q1, q0, n_tr, penalty)
    lt = max(min_t, 2)
    lc = max(min_c, 2)
    best = np.inf
    best_f = -1
    best_thr = np.nan
    if n1 < 2 * lt or n0 < 2 * lc:
        return best_f, best_thr, best, parent
    x = np.empty(n)
    for f in features:
        for i in range(n):
            x[i] = F[rows[i], f]
        order = np.argsort(x, kind="mergesort")
        a1 = 0.0
        a0 = 0.0
        b1 = 0.0
        b0 = 0.0
        c1 = 0.0
        c0 = 0.0
        for i in range(n - 1):
            r = rows[order[i]]
            v = y[r] - center
            if d[r]:
                a1 += 1.0
                b1 += v
                c1 += v * v
            else:
                a0 += 1.0
                b0 += v
                c0 += v * v
            lo = x[order[i]]
            hi = x[order[i + 1]]
            if lo == hi:
                continue
            if a1 < lt or a0 < lc or n1 - a1 < lt or n0 - a0 < lc:
                continue
            crit = (leaf_contribution(a1, a0, b1, b0, c1, c0, n_tr, penalty)
                    + leaf_contribution(n1 - a1, n0 - a0, s1 - b1, s0 - b0, q1 - c1, q0 - c0, n_tr, penalty))
            if best == np.inf or crit < best - TIE_RTOL * abs(best):
                best = crit
                best_f = f
                thr = 0.5 * (lo + hi)
                if thr >= hi:
                    thr = lo
                best_thr = thr
    return best_f, best_thr, best, parent


@njit(cache=True, nogil=True)
def grow_greedy(F, y, d, rows, n_tr, penalty, min_t, min_c, max_depth, epsilon, feature_keys, m):
    """Breadth-first greedy growth with difference-in-means leaf effects.

    ``feature_keys`` has one row of random keys per node id; a node searches the
    ``m`` features with the smallest keys. An empty key matrix searches every
    feature. ``max_depth < 0`` means unlimited.

    Returns node arrays (feature, threshold, left, right, depth, n_treated,
    n_control, leaf criterion) with feature = -1 at leaves.
    """
    n = rows.shape[0]
    p = F.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.full(cap, np.nan)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)
    nt = np.zeros(cap, dtype=np.int64)
    nc = np.zeros(cap, dtype=np.int64)
    crit = np.full(cap, np.nan)
    perm = rows.copy()
    all_features = np.arange(p)
    use_keys = feature_keys.shape[0] > 0
    stop[0] = n
    count = 1
    head = 0
    while head < count:
        node = head
        head += 1
        seg = perm[start[node]:stop[node]]
        k1 = 0
        for r in seg:
            if d[r]:
                k1 += 1
        nt[node] = k1
        nc[node] = seg.shape[0] - k1
        if max_depth >= 0 and depth[node] >= max_depth:
            feats = all_features[:0]
        elif use_keys:
            feats = np.sort(np.argsort(feature_keys[node], kind="mergesort")[:m])
        else:
            feats = all_features
        f, thr, child, parent = best_split(F, y, d, seg, feats, n_tr, penalty, min_t, min_c)
        crit[node] = parent
        if f < 0 or not (child < parent - epsilon):
            continue
        lbuf = np.empty(seg.shape[0], dtype=np.int64)
        rbuf = np.empty(seg.shape[0], dtype=np.int64)
        nl = 0
        nr = 0
        for r in seg:
            if F[r, f] <= thr:
                lbuf[nl] = r
                nl += 1
            else:
                rbuf[nr] = r
                nr += 1
        s = start[node]
        perm[s:s + nl] = lbuf[:nl]
        perm[s + nl:s + nl + nr] = rbuf[:nr]
        feature[node] = f
        threshold[node] = thr
        left[node] = count
        right[node] = count + 1
        depth[count] = depth[node] + 1
        depth[count + 1] = depth[node] + 1
        start[count] = s
        stop[count] = s + nl
        start[count + 1] = s + nl
        stop[count + 1] = stop[node]
        count += 2
    return (feature[:count], threshold[:count], left[:count], right[:count], depth[:count],
            nt[:count], nc[:count], crit[:count])


@njit(cache=True, nogil=True)
def apply_tree(F, feature, threshold, left, right):
    """Leaf node id for every row of F."""
    n = F.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if F[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out
