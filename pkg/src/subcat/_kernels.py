"""Numba-compiled inner loops for tree training and window sliding.

Everything here is deterministic: loops run in a fixed order, ties resolve
to the lowest feature index and lowest threshold bin, and no parallel
reductions are used.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def node_best_split(binned, weights, is_pos, idx, n_bins):
    """Best (feature, threshold-bin) by weighted classification error.

    ``binned`` is (n, f) uint8; ``idx`` selects the node's samples. The
    threshold after bin b sends bins <= b left; either leaf polarity is
    allowed. Returns (feature, bin, error); feature -1 if no split exists.
    """
    n_feat = binned.shape[1]
    wp_tot = 0.0
    wn_tot = 0.0
    for j in range(idx.size):
        i = idx[j]
        if is_pos[i]:
            wp_tot += weights[i]
        else:
            wn_tot += weights[i]

    best_feat = -1
    best_bin = -1
    best_err = wp_tot + wn_tot + 1.0
    hp = np.zeros(n_bins)
    hn = np.zeros(n_bins)
    for f in range(n_feat):
        for b in range(n_bins):
            hp[b] = 0.0
            hn[b] = 0.0
        for j in range(idx.size):
            i = idx[j]
            b = binned[i, f]
            if is_pos[i]:
                hp[b] += weights[i]
            else:
                hn[b] += weights[i]
        cp = 0.0
        cn = 0.0
        for b in range(n_bins - 1):
            cp += hp[b]
            cn += hn[b]
            e_left_pos = cn + (wp_tot - cp)
            e_left_neg = cp + (wn_tot - cn)
            err = e_left_pos if e_left_pos < e_left_neg else e_left_neg
            if err < best_err:
                best_err = err
                best_feat = f
                best_bin = b
    return best_feat, best_bin, best_err


@njit(cache=True, nogil=True)
def eval_trees_matrix(
    F, root_feat, root_thr, child_feat, child_thr, leaves
):
    """Sum of depth-2 tree outputs for every row of F."""
    n = F.shape[0]
    n_trees = root_feat.size
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for t in range(n_trees):
            side = 0 if F[i, root_feat[t]] < root_thr[t] else 1
            leaf = 0 if F[i, child_feat[t, side]] < child_thr[t, side] else 1
            s += leaves[t, side * 2 + leaf]
        out[i] = s
    return out


@njit(cache=True, nogil=True)
def slide_level(
    planes,
    win_h,
    win_w,
    stride,
    root_p, root_dy, root_dx, root_thr,
    child_p, child_dy, child_dx, child_thr,
    leaves,
    cascade,
):
    """Soft-cascade evaluation of every window position on one level.

    Returns a (rows, cols) score grid; rejected windows hold -inf. Node
    feature lookups are pre-decomposed into (plane, dy, dx) offsets.
    """
    ha = planes.shape[1]
    wa = planes.shape[2]
    n_trees = root_p.size
    rows = (ha - win_h) // stride + 1
    cols = (wa - win_w) // stride + 1
    out = np.full((rows, cols), -np.inf)
    if rows <= 0 or cols <= 0:
        return out
    for ri in range(rows):
        r = ri * stride
        for ci in range(cols):
            c = ci * stride
            s = 0.0
            alive = True
            for t in range(n_trees):
                v = planes[root_p[t], r + root_dy[t], c + root_dx[t]]
                side = 0 if v < root_thr[t] else 1
                v2 = planes[
                    child_p[t, side], r + child_dy[t, side], c + child_dx[t, side]
                ]
                leaf = 0 if v2 < child_thr[t, side] else 1
                s += leaves[t, side * 2 + leaf]
                if s < cascade[t]:
                    alive = False
                    break
            if alive:
                out[ri, ci] = s
    return out
