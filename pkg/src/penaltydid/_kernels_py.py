"""Pure NumPy fallback for the compiled kernels.

Mirrors ``_kernels.pyx`` operation for operation, including summation order,
so both backends grow the same trees and return bit-identical arrays.
"""

from __future__ import annotations

import numpy as np


def _seq_sum(a: np.ndarray) -> float:
    # np.sum is pairwise; cumsum is strictly sequential like the C loops
    return float(np.cumsum(a)[-1]) if a.size else 0.0


def build_tree(xb, n_bins, y, counts, max_depth, min_leaf):
    xb = np.ascontiguousarray(xb, dtype=np.uint8)
    y = np.ascontiguousarray(y, dtype=np.float64)
    counts = np.ascontiguousarray(counts, dtype=np.int32)
    p = xb.shape[1]
    idx = np.flatnonzero(counts > 0).astype(np.int64)

    feature: list[int] = []
    split_bin: list[int] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    weight: list[float] = []

    stack = [(idx, 0, -1, 0)]
    while stack:
        rows, depth, parent, side = stack.pop()
        node = len(feature)
        feature.append(-1)
        split_bin.append(-1)
        left.append(-1)
        right.append(-1)
        if parent >= 0:
            if side == 0:
                left[parent] = node
            else:
                right[parent] = node

        c = counts[rows].astype(np.float64)
        cy = c * y[rows]
        w = _seq_sum(c)
        s = _seq_sum(cy)
        value.append(s / w if w > 0 else 0.0)
        weight.append(w)

        if depth >= max_depth or w < 2.0 * min_leaf:
            continue

        best = -1.0
        best_f = -1
        best_b = -1
        for j in range(p):
            nb = int(n_bins[j])
            if nb < 2:
                continue
            codes = xb[rows, j]
            hw = np.bincount(codes, weights=c, minlength=nb)
            hs = np.bincount(codes, weights=cy, minlength=nb)
            s_j = _seq_sum(hs)
            base = s_j * s_j / w
            tol = 1e-12 * (1.0 + base)
            wl = np.cumsum(hw[:-1])
            sl = np.cumsum(hs[:-1])
            wr = w - wl
            ok = (wl >= min_leaf) & (hw[:-1] != 0.0)
            # the C loop stops at the first bin whose right side is too small
            stop = np.flatnonzero(ok & (wr < min_leaf))
            if stop.size:
                ok[stop[0]:] = False
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                sr = s_j - sl
                score = sl * sl / wl + sr * sr / wr - base
            score = np.where(ok, score, -np.inf)
            b = int(np.argmax(score))
            if score[b] > tol and score[b] > best:
                best = float(score[b])
                best_f = j
                best_b = b

        if best_f < 0:
            continue

        feature[node] = best_f
        split_bin[node] = best_b
        go_left = xb[rows, best_f] <= best_b
        stack.append((rows[~go_left], depth + 1, node, 1))
        stack.append((rows[go_left], depth + 1, node, 0))

    return (np.asarray(feature, dtype=np.int32), np.asarray(split_bin, dtype=np.int32),
            np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
            np.asarray(value, dtype=np.float64), np.asarray(weight, dtype=np.float64))


def predict_forest(xb, feature, split_bin, left, right, value, offsets):
    xb = np.ascontiguousarray(xb, dtype=np.uint8)
    n = xb.shape[0]
    rows = np.arange(n)
    out = np.zeros(n, dtype=np.float64)
    n_trees = len(offsets) - 1
    for t in range(n_trees):
        base = int(offsets[t])
        f = feature[base:int(offsets[t + 1])]
        sb = split_bin[base:int(offsets[t + 1])]
        lt = left[base:int(offsets[t + 1])]
        rt = right[base:int(offsets[t + 1])]
        node = np.zeros(n, dtype=np.int64)
        active = f[node] >= 0
        while active.any():
            cur = node[active]
            fc = f[cur]
            go_left = xb[rows[active], fc] <= sb[cur]
            node[active] = np.where(go_left, lt[cur], rt[cur])
            active = f[node] >= 0
        out += value[base:int(offsets[t + 1])][node]
    if n_trees > 0:
        out /= n_trees
    return out


def smooth_batch(unit, start, length, n_units, horizon):
    out = np.zeros((n_units, horizon + 1), dtype=np.int32)
    lo = np.clip(np.asarray(start, dtype=np.int64), 0, horizon)
    hi = np.clip(np.asarray(start, dtype=np.int64) + np.asarray(length, dtype=np.int64), 0, horizon)
    keep = hi > lo
    np.add.at(out, (np.asarray(unit)[keep], lo[keep]), 1)
    np.add.at(out, (np.asarray(unit)[keep], hi[keep]), -1)
    raw = np.cumsum(out, axis=1)[:, :horizon] > 0
    s = raw.copy()
    if horizon >= 3:
        gap1 = raw[:, :-2] & ~raw[:, 1:-1] & raw[:, 2:]
        s[:, 1:-1] |= gap1
    if horizon >= 4:
        gap2 = raw[:, :-3] & ~raw[:, 1:-2] & ~raw[:, 2:-1] & raw[:, 3:]
        s[:, 1:-2] |= gap2
        s[:, 2:-1] |= gap2
    return s.astype(np.uint8)
