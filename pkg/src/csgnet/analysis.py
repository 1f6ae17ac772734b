"""Structural analyses of the trained filters.

Covers the weight-cosine correlation matrix and its redundancy summaries,
per-class top-activated filter groups, feature-vs-gate similarity matrices
over TP/FN subsets, the filter-masking (indispensability) experiment, and
k-means cluster centers of pooled features.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .training import collect_pooled_features, evaluate

log = logging.getLogger(__name__)


@dataclass
class CorrelationMatrix:
    """K-by-K cosine similarities between filter weight vectors."""

    values: np.ndarray
    source: str = "weights"


@dataclass
class SimilarityMatrix:
    """C-by-C cosine of per-class mean features against gate rows.

    Rows for classes whose subset was empty are NaN and serialize as null.
    """

    values: np.ndarray
    subset: str


def correlation_matrix(weight_vectors):
    """Pairwise cosine of filter weight rows."""
    w = np.asarray(weight_vectors, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"filter {zero[0]} has zero-norm weights")
    unit = w / norms[:, None]
    c = np.clip(unit @ unit.T, -1.0, 1.0)
    return CorrelationMatrix(values=c)


def ratio_above(cmat, threshold):
    """Fraction of off-diagonal correlation entries >= threshold."""
    c = cmat.values if isinstance(cmat, CorrelationMatrix) else np.asarray(cmat)
    k = c.shape[0]
    if k < 2:
        return 0.0
    off = ~np.eye(k, dtype=bool)
    return float((c[off] >= threshold).mean())


def top_activated_groups(model, images, labels, m):
    """Indices of the m filters with largest mean pooled activation per class.

    Ties break toward the lower filter index.
    """
    labels = np.asarray(labels)
    if m > model.num_filters:
        raise ValueError(f"m={m} exceeds filter count {model.num_filters}")
    feats = collect_pooled_features(model, images)
    groups = []
    for c in range(model.num_classes):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} absent from the dataset")
        mean_act = feats[sel].mean(axis=0)
        order = np.argsort(-mean_act, kind="stable")
        groups.append(np.sort(order[:m]))
    return groups


def inter_class_correlation(cmat, groups, m):
    """Mean weight correlation across different classes' top filter groups."""
    c = cmat.values if isinstance(cmat, CorrelationMatrix) else np.asarray(cmat)
    for g in groups:
        if len(g) != m:
            raise ValueError("every group must have exactly m filters")
    num_classes = len(groups)
    total = 0.0
    for a in range(num_classes):
        for b in range(num_classes):
            if a == b:
                continue
            total += c[np.ix_(groups[a], groups[b])].sum()
    return float(total / (num_classes * (num_classes - 1) * m * m))


def similarity_matrix(model, images, labels, gate, subset="TP"):
    """Cosine of per-class mean pooled features against each gate row.

    subset: 'TP' (correctly classified), 'FN' (true class missed), or 'ALL'.
    Classes with an empty subset produce NaN rows (serialized as null).
    """
    if subset not in ("TP", "FN", "ALL"):
        raise ValueError(f"unknown subset {subset!r}")
    labels = np.asarray(labels)
    rows = gate.values.astype(np.float64)
    row_norms = np.linalg.norm(rows, axis=1)
    if np.any(row_norms == 0):
        raise ValueError("gate has an all-zero class row; cosine undefined")
    feats = collect_pooled_features(model, images)
    preds = _predict(model, images)
    c = model.num_classes
    values = np.full((c, c), np.nan)
    for y in range(c):
        if subset == "TP":
            sel = (labels == y) & (preds == y)
        elif subset == "FN":
            sel = (labels == y) & (preds != y)
        else:
            sel = labels == y
        if not sel.any():
            log.warning("similarity subset %s empty for class %d", subset, y)
            continue
        a = feats[sel].mean(axis=0)
        na = np.linalg.norm(a)
        if na == 0:
            continue
        values[y] = (rows @ a) / (row_norms * na)
    return SimilarityMatrix(values=values, subset=subset)


def _predict(model, images, batch_size=256):
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits = model._run(images[start:start + batch_size])["logits"]
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def mask_filters(model, gate, target_classes, tau=0.5):
    """Zero out every filter whose gate entry exceeds tau for a target class.

    Returns a masked copy; the input model is untouched.  If nothing crosses
    the threshold the copy is an identity masking (with a warning).
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    target_classes = np.atleast_1d(np.asarray(target_classes, dtype=int))
    selected = np.zeros(model.num_filters, dtype=bool)
    for c in target_classes:
        selected |= gate.values[c] > tau
    if not selected.any():
        log.warning("mask_filters: no gate entry above tau=%s; identity masking", tau)
    mask = np.where(selected, 0.0, 1.0).astype(np.float32)
    masked = model.with_mask(mask)
    return masked


def mask_filters_by_activation(model, images, labels, target_classes,
                               fraction=0.1):
    """Baseline masking for ungated models: per target class, zero the
    top ``fraction`` of filters by mean pooled activation over that class."""
    labels = np.asarray(labels)
    feats = collect_pooled_features(model, images)
    count = max(1, int(round(fraction * model.num_filters)))
    selected = np.zeros(model.num_filters, dtype=bool)
    for c in np.atleast_1d(np.asarray(target_classes, dtype=int)):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} absent from the dataset")
        mean_act = feats[sel].mean(axis=0)
        order = np.argsort(-mean_act, kind="stable")
        selected[order[:count]] = True
    mask = np.where(selected, 0.0, 1.0).astype(np.float32)
    return model.with_mask(mask)


def recall_per_class(confusion):
    """Diagonal over row sums; rows with no samples give NaN."""
    confusion = np.asarray(confusion, dtype=np.float64)
    totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.diag(confusion) / totals


def masking_experiment(model, gate, images, labels, target_classes, tau=0.5,
                       baseline_fraction=None):
    """Recall before/after masking the target classes' filters.

    With ``baseline_fraction`` set, masking selects by mean activation
    (the ungated-model baseline) instead of by gate entries.
    """
    _, conf_before = evaluate(model, images, labels)
    if baseline_fraction is None:
        masked = mask_filters(model, gate, target_classes, tau)
    else:
        masked = mask_filters_by_activation(
            model, images, labels, target_classes, baseline_fraction)
    _, conf_after = evaluate(masked, images, labels)
    return {
        "recall_before": recall_per_class(conf_before),
        "recall_after": recall_per_class(conf_after),
        "confusion_before": conf_before,
        "confusion_after": conf_after,
        "masked_filters": np.flatnonzero(masked.penultimate_mask == 0.0),
    }


def kmeans_centers(pooled_features, num_clusters, seed=0):
    """k-means centers of pooled feature vectors, sorted for display.

    Standard k-means++ with a fixed seed; centers come back ordered by the
    index of their largest coordinate so reruns and plots line up.
    """
    from sklearn.cluster import KMeans

    feats = np.asarray(pooled_features, dtype=np.float64)
    if feats.shape[0] < num_clusters:
        raise ValueError("need at least num_clusters samples")
    if np.unique(feats, axis=0).shape[0] < num_clusters:
        raise ValueError("fewer distinct points than clusters")
    km = KMeans(n_clusters=num_clusters, init="k-means++", n_init=10,
                max_iter=300, tol=1e-4, random_state=seed)
    km.fit(feats)
    centers = km.cluster_centers_
    order = np.argsort([int(np.argmax(c)) for c in centers], kind="stable")
    return centers[order]
