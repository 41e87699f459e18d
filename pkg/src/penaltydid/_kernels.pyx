# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: histogram CART growth, forest prediction, prescription smoothing.

Every routine here has a line-for-line NumPy twin in ``_kernels_py`` and the
two must produce identical output. Summation orders are part of the contract.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()

ctypedef cnp.uint8_t u8
ctypedef cnp.int32_t i32
ctypedef cnp.int64_t i64
ctypedef cnp.float64_t f64


def build_tree(const u8[:, ::1] xb, const i32[::1] n_bins, const f64[::1] y,
               const i32[::1] counts, int max_depth, int min_leaf):
    """Grow one regression tree on binned features.

    Returns ``(feature, split_bin, left, right, value, weight)`` node arrays in
    preorder. Leaves carry ``feature == -1``.
    """
    cdef Py_ssize_t n = xb.shape[0]
    cdef Py_ssize_t p = xb.shape[1]
    cdef Py_ssize_t i, j, b, k, r
    cdef int max_bins = 1
    for j in range(p):
        if n_bins[j] > max_bins:
            max_bins = n_bins[j]

    cdef Py_ssize_t n_in = 0
    for i in range(n):
        if counts[i] > 0:
            n_in += 1
    cdef i64[::1] idx = np.empty(max(n_in, 1), dtype=np.int64)
    cdef i64[::1] buf = np.empty(max(n_in, 1), dtype=np.int64)
    k = 0
    for i in range(n):
        if counts[i] > 0:
            idx[k] = i
            k += 1

    # preorder node storage; a binary tree of depth d has < 2**(d+1) nodes
    cdef Py_ssize_t cap = 2 * n_in + 1
    if max_depth < 30 and (1 << (max_depth + 1)) < cap:
        cap = 1 << (max_depth + 1)
    cdef i32[::1] feature = np.full(cap, -1, dtype=np.int32)
    cdef i32[::1] split_bin = np.full(cap, -1, dtype=np.int32)
    cdef i32[::1] left = np.full(cap, -1, dtype=np.int32)
    cdef i32[::1] right = np.full(cap, -1, dtype=np.int32)
    cdef f64[::1] value = np.zeros(cap, dtype=np.float64)
    cdef f64[::1] weight = np.zeros(cap, dtype=np.float64)

    # stack entries: start, end, depth, parent, side
    cdef i64[:, ::1] stack = np.empty((cap + 1, 5), dtype=np.int64)
    cdef Py_ssize_t top = 0
    cdef Py_ssize_t n_nodes = 0

    cdef double *hw = <double *> malloc(max_bins * sizeof(double))
    cdef double *hs = <double *> malloc(max_bins * sizeof(double))

    cdef Py_ssize_t start, end, depth, parent, side, node, mid, nl
    cdef double w, s, c, base, wl, sl, wr, sr, score, best, tol
    cdef int best_f, best_b, nb
    cdef double s_j

    stack[0, 0] = 0
    stack[0, 1] = n_in
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    try:
        while top > 0:
            top -= 1
            start = stack[top, 0]
            end = stack[top, 1]
            depth = stack[top, 2]
            parent = stack[top, 3]
            side = stack[top, 4]
            node = n_nodes
            n_nodes += 1
            if parent >= 0:
                if side == 0:
                    left[parent] = <i32> node
                else:
                    right[parent] = <i32> node

            w = 0.0
            s = 0.0
            for k in range(start, end):
                r = idx[k]
                c = counts[r]
                w += c
                s += c * y[r]
            value[node] = s / w if w > 0 else 0.0
            weight[node] = w

            if depth >= max_depth or w < 2.0 * min_leaf:
                continue

            best = -1.0
            best_f = -1
            best_b = -1
            base = 0.0
            for j in range(p):
                nb = n_bins[j]
                if nb < 2:
                    continue
                memset(hw, 0, nb * sizeof(double))
                memset(hs, 0, nb * sizeof(double))
                for k in range(start, end):
                    r = idx[k]
                    c = counts[r]
                    hw[xb[r, j]] += c
                    hs[xb[r, j]] += c * y[r]
                s_j = 0.0
                for b in range(nb):
                    s_j += hs[b]
                base = s_j * s_j / w
                tol = 1e-12 * (1.0 + base)
                wl = 0.0
                sl = 0.0
                for b in range(nb - 1):
                    wl += hw[b]
                    sl += hs[b]
                    if wl < min_leaf or hw[b] == 0.0:
                        continue
                    wr = w - wl
                    if wr < min_leaf:
                        break
                    sr = s_j - sl
                    score = sl * sl / wl + sr * sr / wr - base
                    if score > tol and score > best:
                        best = score
                        best_f = <int> j
                        best_b = <int> b

            if best_f < 0:
                continue

            feature[node] = best_f
            split_bin[node] = best_b
            # stable partition of [start, end)
            nl = 0
            for k in range(start, end):
                r = idx[k]
                if xb[r, best_f] <= best_b:
                    buf[start + nl] = r
                    nl += 1
            mid = start + nl
            for k in range(start, end):
                r = idx[k]
                if xb[r, best_f] > best_b:
                    buf[start + nl] = r
                    nl += 1
            for k in range(start, end):
                idx[k] = buf[k]

            # push right first so the left subtree is numbered first
            stack[top, 0] = mid
            stack[top, 1] = end
            stack[top, 2] = depth + 1
            stack[top, 3] = node
            stack[top, 4] = 1
            top += 1
            stack[top, 0] = start
            stack[top, 1] = mid
            stack[top, 2] = depth + 1
            stack[top, 3] = node
            stack[top, 4] = 0
            top += 1
    finally:
        free(hw)
        free(hs)

    return (np.asarray(feature[:n_nodes]).copy(), np.asarray(split_bin[:n_nodes]).copy(),
            np.asarray(left[:n_nodes]).copy(), np.asarray(right[:n_nodes]).copy(),
            np.asarray(value[:n_nodes]).copy(), np.asarray(weight[:n_nodes]).copy())


def predict_forest(const u8[:, ::1] xb, const i32[::1] feature, const i32[::1] split_bin,
                   const i32[::1] left, const i32[::1] right, const f64[::1] value,
                   const i64[::1] offsets):
    """Mean prediction over trees stored back to back; tree ``t`` owns
    nodes ``offsets[t]:offsets[t + 1]`` with child indices local to the tree."""
    cdef Py_ssize_t n = xb.shape[0]
    cdef Py_ssize_t n_trees = offsets.shape[0] - 1
    cdef Py_ssize_t i, t, base, node
    cdef int f
    out_arr = np.zeros(n, dtype=np.float64)
    cdef f64[::1] out = out_arr
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            f = feature[base]
            while f >= 0:
                if xb[i, f] <= split_bin[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
                f = feature[base + node]
            out[i] += value[base + node]
    if n_trees > 0:
        for i in range(n):
            out[i] /= n_trees
    return out_arr


def smooth_batch(const i64[::1] unit, const i64[::1] start, const i64[::1] length,
                 Py_ssize_t n_units, Py_ssize_t horizon):
    """Spell expansion followed by 1-2 month gap filling, one row per unit."""
    out_arr = np.zeros((n_units, horizon), dtype=np.uint8)
    cdef u8[:, ::1] out = out_arr
    cdef Py_ssize_t k, u, m, lo, hi, last, gap
    for k in range(unit.shape[0]):
        u = unit[k]
        lo = start[k]
        hi = start[k] + length[k]
        if lo < 0:
            lo = 0
        if hi > horizon:
            hi = horizon
        for m in range(lo, hi):
            out[u, m] = 1
    for u in range(n_units):
        last = -1
        for m in range(horizon):
            if out[u, m] == 1:
                if last >= 0:
                    gap = m - last - 1
                    if gap == 1 or gap == 2:
                        for k in range(last + 1, m):
                            out[u, k] = 2
                last = m
        for m in range(horizon):
            if out[u, m] == 2:
                out[u, m] = 1
    return out_arr
