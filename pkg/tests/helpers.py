"""Shared test utilities: parameter jitter and independent finite differences."""

import numpy as np


def jitter_params(store, seed, scale=0.2):
    """Offset every parameter so rect pre-activations sit away from the kink.

    Freshly initialized stores have exactly-zero biases, which makes cascaded
    rectifier inputs exactly zero and breaks central differences.
    """
    rng = np.random.default_rng(seed)
    for name in store.names():
        store.value(name)[...] += rng.normal(scale=scale, size=store.value(name).shape)
    return store


def numeric_gradient(fn, array, step=1e-6):
    """Central finite differences of scalar fn() w.r.t. an array, in place."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn())
        flat[i] = orig - step
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def rank_auc(pos_scores, neg_scores):
    """Area under the ROC curve via the rank-sum statistic."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    combined = np.concatenate([pos, neg])
    order = combined.argsort(kind="mergesort")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(1, combined.size + 1)
    # midranks for ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[: pos.size].sum()
    n_pos, n_neg = pos.size, neg.size
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
