"""Class-specificity measurement via filter/class mutual information.

Entry (k, c) of the MI matrix is the mutual information between filter k's
pooled activation (continuous) and the indicator of class c (binary),
estimated with the nearest-neighbor method for continuous/discrete mixtures:
for each point, take the distance to its k-th neighbor *within its own
label group*, count how many points of the full sample fall strictly inside
that radius, and average digamma terms.  MIS summarizes the matrix as
mean over filters of the max over classes.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma


@dataclass
class MIMatrix:
    """K-by-C matrix of nonnegative MI estimates (nats)."""

    values: np.ndarray
    sample_count: int

    @property
    def num_filters(self):
        return self.values.shape[0]

    @property
    def num_classes(self):
        return self.values.shape[1]


def _kth_neighbor_distance(sorted_vals, k):
    """k-th nearest-neighbor distance for each element of a sorted 1-D array."""
    n = sorted_vals.size
    cand = np.empty((n, 2 * k), dtype=np.float64)
    for t in range(1, k + 1):
        left = np.empty(n)
        left[:t] = np.inf
        left[t:] = sorted_vals[t:] - sorted_vals[:-t]
        right = np.empty(n)
        right[:-t] = sorted_vals[t:] - sorted_vals[:-t]
        right[-t:] = np.inf
        cand[:, t - 1] = left
        cand[:, k + t - 1] = right
    return np.partition(cand, k - 1, axis=1)[:, k - 1]


def mi_continuous_discrete(samples, indicator, k_neighbors=3, rng=None):
    """MI (nats, >= 0) between a continuous sample and a binary indicator.

    A constant indicator has zero label entropy, so the MI is 0 by
    definition.  Duplicate sample values get hash-scale (1e-10) seeded noise
    so neighbor ranks are well defined.
    """
    x = np.asarray(samples, dtype=np.float64).copy()
    ind = np.asarray(indicator, dtype=bool)
    n = x.size
    if x.shape != ind.shape or x.ndim != 1:
        raise ValueError("samples and indicator must be 1-D and equal length")
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    n_pos = int(ind.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.0
    if k_neighbors >= min(n_pos, n_neg):
        raise ValueError(
            f"k_neighbors={k_neighbors} must be below the smaller class "
            f"count ({min(n_pos, n_neg)})"
        )

    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    dup = counts[inverse] > 1
    if np.any(dup):
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        x[dup] += 1e-10 * rng.uniform(-1.0, 1.0, size=int(dup.sum()))

    radius = np.empty(n)
    for group in (ind, ~ind):
        idx = np.flatnonzero(group)
        order = np.argsort(x[idx], kind="stable")
        svals = x[idx][order]
        d = _kth_neighbor_distance(svals, k_neighbors)
        radius[idx[order]] = d

    # m_i: points of the full sample strictly inside the k-th same-label
    # neighbor distance (the point itself counts, the defining neighbor
    # does not).  Open-interval searchsorted keeps the boundary exact.
    xs = np.sort(x)
    m = (np.searchsorted(xs, x + radius, side="left")
         - np.searchsorted(xs, x - radius, side="right"))
    label_counts = np.where(ind, n_pos, n_neg)
    mi = (digamma(n) + digamma(k_neighbors)
          - float(np.mean(digamma(label_counts)))
          - float(np.mean(digamma(m))))
    return max(0.0, float(mi))


def mi_matrix(pooled_features, labels, k_neighbors=3, seed=0):
    """MI of every (filter, class) pair; entries computed independently."""
    feats = np.asarray(pooled_features, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim != 2 or labels.shape != (feats.shape[0],):
        raise ValueError("expected features (N,K) and labels (N,)")
    num_classes = int(labels.max()) + 1
    if np.unique(labels).size != num_classes:
        raise ValueError("all classes must be present in the sample")
    n, k = feats.shape
    values = np.zeros((k, num_classes))
    for kf in range(k):
        col = feats[:, kf]
        for c in range(num_classes):
            rng = np.random.default_rng([seed, kf, c])
            values[kf, c] = mi_continuous_discrete(
                col, labels == c, k_neighbors=k_neighbors, rng=rng)
    return MIMatrix(values=values, sample_count=n)


def mis(matrix):
    """Mean over filters of the max over classes: the class-specificity score."""
    values = matrix.values if isinstance(matrix, MIMatrix) else np.asarray(matrix)
    return float(values.max(axis=1).mean())
