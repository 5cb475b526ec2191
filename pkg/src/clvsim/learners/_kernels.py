"""Compiled inner loops. All loops run in a fixed order so results are bit-reproducible."""
import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


@njit(cache=True)
def build_histogram(binned, idx, target, n_bins):
    n_features = binned.shape[1]
    sums = np.zeros((n_features, n_bins))
    counts = np.zeros((n_features, n_bins), dtype=np.int64)
    for ii in range(idx.shape[0]):
        i = idx[ii]
        g = target[i]
        for f in range(n_features):
            b = binned[i, f]
            sums[f, b] += g
            counts[f, b] += 1
    return sums, counts


@njit(cache=True)
def _route(x, feature, threshold, missing_left, left, right):
    node = 0
    while feature[node] >= 0:
        v = x[feature[node]]
        if v != v:
            go_left = missing_left[node]
        else:
            go_left = v <= threshold[node]
        node = left[node] if go_left else right[node]
    return node


@njit(cache=True, parallel=True)
def apply_tree(X, feature, threshold, missing_left, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in prange(X.shape[0]):
        out[i] = _route(X[i], feature, threshold, missing_left, left, right)
    return out


@njit(cache=True, parallel=True)
def ensemble_scores(X, init, shrinkage, offsets, tree_class, feature, threshold, missing_left, left, right, value):
    """Sum tree outputs in storage order; ``offsets[j]`` is the first node of tree j."""
    n = X.shape[0]
    k = init.shape[0]
    out = np.empty((n, k))
    n_trees = tree_class.shape[0]
    for i in prange(n):
        for c in range(k):
            out[i, c] = init[c]
        for j in range(n_trees):
            o = offsets[j]
            node = o + _route(
                X[i], feature[o:], threshold[o:], missing_left[o:], left[o:], right[o:]
            )
            out[i, tree_class[j]] += shrinkage * value[node]
    return out


@njit(cache=True)
def best_split(sums, counts, n_thresholds, missing_bin, min_samples_leaf, allowed):
    """Scan thresholds feature-major; the first strict maximum wins (lowest feature, then threshold).

    Rows in ``missing_bin`` always go left. Returns (gain, feature, threshold index) or gain=-inf.
    """
    n_features = sums.shape[0]
    best_gain = -np.inf
    best_f = -1
    best_j = -1
    total_s = 0.0
    total_n = 0
    for b in range(sums.shape[1]):
        total_s += sums[0, b]
        total_n += counts[0, b]
    for f in range(n_features):
        if not allowed[f]:
            continue
        cs = sums[f, missing_bin]
        cn = counts[f, missing_bin]
        for j in range(n_thresholds[f]):
            cs += sums[f, j]
            cn += counts[f, j]
            rn = total_n - cn
            if cn < min_samples_leaf or rn < min_samples_leaf:
                continue
            diff = cs / cn - (total_s - cs) / rn
            gain = cn * rn / total_n * diff * diff
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_j = j
    return best_gain, best_f, best_j
