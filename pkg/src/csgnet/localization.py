"""Weakly supervised localization from filter maps, and its scoring.

Three map constructions: GradMap (input gradient of a filter's pooled
activation, RMS-normalized, blurred, thresholded at 1.0), ActivMap (filter
activation map bilinearly resized, thresholded at the filter's 70th
percentile over the whole test set), and CAM (linear-weight-summed
activation maps, thresholded at the per-image 70th percentile).  Scoring is
IoU against ground-truth masks with Avg-IoU and APn aggregates.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .model import head_pooled_filter, input_gradient

log = logging.getLogger(__name__)


@dataclass
class SegMap:
    """Binary segmentation map, same spatial size as the input image."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)

    @property
    def area(self):
        return int(self.values.sum())


@dataclass
class LocalizationReport:
    """Per-filter, per-class, and overall localization aggregates."""

    method: str
    n_percent: int
    per_filter: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)


def resize_bilinear(maps, out_h, out_w):
    """Corner-aligned separable bilinear resize of (..., h, w) arrays."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]

    def weights(n_in, n_out):
        mat = np.zeros((n_out, n_in))
        if n_in == 1:
            mat[:, 0] = 1.0
            return mat
        pos = (np.arange(n_out) * (n_in - 1)
               / (n_out - 1 if n_out > 1 else 1))
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        mat[np.arange(n_out), lo] += 1.0 - frac
        mat[np.arange(n_out), hi] += frac
        return mat

    a = weights(h, out_h)
    b = weights(w, out_w)
    return np.einsum("ij,...jk,lk->...il", a, maps, b)


def binarize(values, threshold, relative=False):
    """values >= threshold, except relative thresholds equal to the map max
    fall back to a strict comparison so constant maps segment nothing."""
    values = np.asarray(values)
    if relative and threshold >= values.max():
        return values > threshold
    return values >= threshold


def grad_map(model, image, filter_k, sigma=5.0):
    """Segmentation from the input gradient of filter k's pooled activation.

    Channel-L2 reduce, divide by the map RMS, Gaussian blur (truncated at
    3 sigma, reflect boundary), keep values >= 1.0.
    """
    g = input_gradient(model, image, head_pooled_filter(filter_k))
    sal = np.sqrt((np.asarray(g, dtype=np.float64) ** 2).sum(axis=0))
    rms = np.sqrt((sal ** 2).mean())
    if rms == 0.0:
        log.warning("grad_map: zero gradient for filter %d; empty map", filter_k)
        return SegMap(np.zeros(sal.shape, dtype=bool))
    sal /= rms
    sal = gaussian_filter(sal, sigma=sigma, mode="reflect", truncate=3.0)
    return SegMap(binarize(sal, 1.0))


def activation_thresholds(model, images, percent=70.0, batch_size=256):
    """Per-filter activation percentile over an entire dataset split."""
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        maps = model._run(images[start:start + batch_size])["maps"]
        chunks.append(maps.transpose(1, 0, 2, 3).reshape(model.num_filters, -1))
    allvals = np.concatenate(chunks, axis=1)
    return np.percentile(allvals, percent, axis=1)


def activ_map(model, image, filter_k, dataset_threshold):
    """Segmentation from filter k's bilinearly resized activation map."""
    if dataset_threshold is None:
        raise ValueError("activ_map needs the precomputed dataset threshold")
    image = np.asarray(image)
    maps = model._run(image[None])["maps"]
    h, w = image.shape[-2:]
    big = resize_bilinear(maps[0, filter_k], h, w)
    return SegMap(binarize(big, float(dataset_threshold), relative=True))


def cam(model, image, class_c):
    """Class activation map: linear-weighted channel sum, image-level 70th
    percentile threshold after resizing."""
    image = np.asarray(image)
    maps = model._run(image[None])["maps"][0]
    weights = model.params["fc.weight"][class_c]
    raw = np.tensordot(weights.astype(np.float64), maps.astype(np.float64), axes=(0, 0))
    h, w = image.shape[-2:]
    big = resize_bilinear(raw, h, w)
    thr = float(np.percentile(big, 70.0))
    return SegMap(binarize(big, thr, relative=True))


def cam_raw(model, images, classes):
    """Unresized weighted-sum maps for a batch (used by the logit identity)."""
    maps = model._run(images)["maps"]
    w = model.params["fc.weight"][np.asarray(classes)]
    return np.einsum("bkhw,bk->bhw", maps.astype(np.float64), w.astype(np.float64))


def iou(seg_a, seg_b):
    """Intersection over union of two binary maps; 0 when the union is empty."""
    a = seg_a.values if isinstance(seg_a, SegMap) else np.asarray(seg_a, dtype=bool)
    b = seg_b.values if isinstance(seg_b, SegMap) else np.asarray(seg_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def localization_metrics(iou_table, n_percent):
    """Aggregate per-(filter, class) IoU samples into the per-filter report.

    iou_table maps (filter, class) to a sequence of per-sample IoUs.  Each
    filter is assigned the class where its APn peaks (ties to the lower
    class index); per-class aggregates average over the filters assigned to
    that class, overall aggregates over all filters.
    """
    filters = sorted({k for k, _ in iou_table})
    classes = sorted({c for _, c in iou_table})
    thr = n_percent / 100.0
    per_filter = []
    for k in filters:
        avg_iou, apn = {}, {}
        for c in classes:
            vals = np.asarray(iou_table.get((k, c), ()), dtype=np.float64)
            if vals.size == 0:
                log.warning("no IoU samples for filter %d class %d", k, c)
                continue
            avg_iou[c] = float(vals.mean())
            apn[c] = float((vals >= thr).mean())
        if not apn:
            continue
        best = min(c for c in apn if apn[c] == max(apn.values()))
        per_filter.append({
            "filter": k,
            "assigned_class": best,
            "avg_iou": avg_iou[best],
            "apn": apn[best],
            "avg_iou_by_class": avg_iou,
            "apn_by_class": apn,
        })
    per_class = {}
    for c in classes:
        rows = [r for r in per_filter if r["assigned_class"] == c]
        if not rows:
            log.warning("no filter assigned to class %d", c)
            continue
        per_class[c] = {
            "avg_iou": float(np.mean([r["avg_iou"] for r in rows])),
            "apn": float(np.mean([r["apn"] for r in rows])),
            "num_filters": len(rows),
        }
    overall = {}
    if per_filter:
        overall = {
            "avg_iou": float(np.mean([r["avg_iou"] for r in per_filter])),
            "apn": float(np.mean([r["apn"] for r in per_filter])),
        }
    return LocalizationReport(method="per-filter", n_percent=n_percent,
                              per_filter=per_filter, per_class=per_class,
                              overall=overall)


def cam_localization_metrics(iou_by_class, n_percent):
    """Aggregate per-class CAM IoU samples (means over samples, not filters)."""
    thr = n_percent / 100.0
    per_class = {}
    all_vals = []
    for c, vals in sorted(iou_by_class.items()):
        vals = np.asarray(vals, dtype=np.float64)
        if vals.size == 0:
            log.warning("no CAM IoU samples for class %d", c)
            continue
        per_class[c] = {
            "avg_iou": float(vals.mean()),
            "apn": float((vals >= thr).mean()),
            "num_samples": int(vals.size),
        }
        all_vals.append(vals)
    overall = {}
    if all_vals:
        cat = np.concatenate(all_vals)
        overall = {"avg_iou": float(cat.mean()), "apn": float((cat >= thr).mean())}
    return LocalizationReport(method="cam", n_percent=n_percent,
                              per_class=per_class, overall=overall)


# -- dataset-level drivers ---------------------------------------------------


def _batched_maps(model, images, batch_size=256):
    for start in range(0, images.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        yield sl, model._run(images[sl])["maps"]


def localize_dataset(model, images, labels, masks, method, n_percent=None,
                     batch_size=256):
    """Run one localization method over a split and score it.

    GradMap reports AP20 by default; ActivMap and CAM report AP30.
    """
    labels = np.asarray(labels)
    h, w = images.shape[-2:]
    if method == "cam":
        n_percent = 30 if n_percent is None else n_percent
        iou_by_class = {c: [] for c in range(model.num_classes)}
        for sl, maps in _batched_maps(model, images, batch_size):
            wsel = model.params["fc.weight"][labels[sl]]
            raw = np.einsum("bkhw,bk->bhw", maps.astype(np.float64),
                            wsel.astype(np.float64))
            big = resize_bilinear(raw, h, w)
            thr = np.percentile(big, 70.0, axis=(1, 2))
            for bi in range(big.shape[0]):
                seg = binarize(big[bi], thr[bi], relative=True)
                gi = sl.start + bi
                iou_by_class[int(labels[gi])].append(iou(seg, masks[gi]))
        return cam_localization_metrics(iou_by_class, n_percent)

    if method == "activmap":
        n_percent = 30 if n_percent is None else n_percent
        thresholds = activation_thresholds(model, images)
        table = {}
        for sl, maps in _batched_maps(model, images, batch_size):
            big = resize_bilinear(maps, h, w)
            for bi in range(big.shape[0]):
                gi = sl.start + bi
                c = int(labels[gi])
                for k in range(model.num_filters):
                    seg = binarize(big[bi, k], float(thresholds[k]), relative=True)
                    table.setdefault((k, c), []).append(iou(seg, masks[gi]))
        rep = localization_metrics(table, n_percent)
        rep.method = "activmap"
        return rep

    if method == "gradmap":
        n_percent = 20 if n_percent is None else n_percent
        table = {}
        for start in range(0, images.shape[0], batch_size):
            sl = slice(start, min(start + batch_size, images.shape[0]))
            cache = model._run(images[sl], keep_ctx=True)
            for k in range(model.num_filters):
                dpooled = np.zeros_like(cache["pooled_raw"])
                dpooled[:, k] = 1.0
                res = model.backward(cache, {"pooled": dpooled},
                                     need_param_grads=False, need_input_grad=True)
                grads = res["input_grad"]
                sal = np.sqrt((grads.astype(np.float64) ** 2).sum(axis=1))
                rms = np.sqrt((sal ** 2).mean(axis=(1, 2)))
                for bi in range(sal.shape[0]):
                    gi = sl.start + bi
                    c = int(labels[gi])
                    if rms[bi] == 0.0:
                        seg = np.zeros((h, w), dtype=bool)
                    else:
                        blurred = gaussian_filter(sal[bi] / rms[bi], sigma=5.0,
                                                  mode="reflect", truncate=3.0)
                        seg = binarize(blurred, 1.0)
                    table.setdefault((k, c), []).append(iou(seg, masks[gi]))
        rep = localization_metrics(table, n_percent)
        rep.method = "gradmap"
        return rep

    raise ValueError(f"unknown localization method {method!r}")
