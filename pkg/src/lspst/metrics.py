"""Pixel- and target-level detection metrics (IoU, nIoU, Pd, Fa, ROC)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import Tensor

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEFAULT_MATCH_DISTANCE = 3.0


def _plane(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.reshape(arr.shape[-2:]) if arr.ndim > 2 else arr


def binarize(conf, thresh):
    return _plane(conf) >= thresh


def pixel_iou(pred, gt):
    pred, gt = _plane(pred).astype(bool), _plane(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def niou(pairs):
    """Per-image mean IoU."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("niou needs at least one (pred, gt) pair")
    return float(np.mean([pixel_iou(p, g) for p, g in pairs]))


@dataclass
class ComponentSet:
    labels: np.ndarray
    count: int
    centroids: np.ndarray  # (count, 2) as (y, x)
    sizes: np.ndarray


def connected_components(mask):
    mask = _plane(mask).astype(bool)
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        return ComponentSet(labels, 0, np.zeros((0, 2)), np.zeros(0, dtype=int))
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    sizes = np.bincount(lab, minlength=count + 1)[1:]
    cy = np.bincount(lab, weights=ys, minlength=count + 1)[1:] / sizes
    cx = np.bincount(lab, weights=xs, minlength=count + 1)[1:] / sizes
    return ComponentSet(labels, int(count), np.stack([cy, cx], axis=1), sizes)


@dataclass
class DetectionCounts:
    detected: int = 0
    targets: int = 0
    fa_pixels: int = 0
    total_pixels: int = 0

    def __add__(self, other):
        return DetectionCounts(self.detected + other.detected, self.targets + other.targets,
                               self.fa_pixels + other.fa_pixels, self.total_pixels + other.total_pixels)

    @property
    def pd(self):
        return 1.0 if self.targets == 0 else self.detected / self.targets

    @property
    def fa(self):
        return self.fa_pixels / self.total_pixels if self.total_pixels else 0.0


def match_counts(pred, gt_centers, dist_thresh=DEFAULT_MATCH_DISTANCE):
    """Greedy nearest-first matching of predicted components to target centers.

    ``gt_centers`` are (y, x) pairs. Each component matches at most one target.
    """
    if dist_thresh <= 0:
        raise ValueError("dist_thresh must be positive")
    comps = connected_components(pred)
    centers = np.asarray(gt_centers, dtype=float).reshape(-1, 2)
    matched = np.zeros(comps.count, dtype=bool)
    found = np.zeros(len(centers), dtype=bool)
    if comps.count and len(centers):
        d = np.hypot(comps.centroids[:, None, 0] - centers[None, :, 0],
                     comps.centroids[:, None, 1] - centers[None, :, 1])
        ci, ti = np.nonzero(d <= dist_thresh)
        # ties broken by coordinates so the outcome ignores label order
        order = np.lexsort((comps.centroids[ci, 1], comps.centroids[ci, 0],
                            centers[ti, 1], centers[ti, 0], d[ci, ti]))
        for k in order:
            c, t = ci[k], ti[k]
            if not matched[c] and not found[t]:
                matched[c] = found[t] = True
    fa_pixels = int(comps.sizes[~matched].sum()) if comps.count else 0
    return DetectionCounts(int(found.sum()), len(centers), fa_pixels, int(comps.labels.size))


def pd_fa(pred, gt_centers, dist_thresh=DEFAULT_MATCH_DISTANCE):
    c = match_counts(pred, gt_centers, dist_thresh)
    return c.pd, c.fa


def mask_centers(mask):
    """Ground-truth target centers as the centroids of the mask's components."""
    return connected_components(mask).centroids


def default_thresholds(count=50):
    return np.linspace(0.0, 1.0, count + 2)[1:-1][::-1]


def roc(confs, gt_centers, thresholds, dist_thresh=DEFAULT_MATCH_DISTANCE):
    """Dataset-pooled (fa, pd) at each threshold (strictly descending)."""
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.ndim != 1 or len(thresholds) == 0 or np.any(np.diff(thresholds) >= 0):
        raise ValueError("roc thresholds must be a non-empty strictly descending list")
    points = []
    for t in thresholds:
        total = DetectionCounts()
        for conf, centers in zip(confs, gt_centers):
            total = total + match_counts(binarize(conf, t), centers, dist_thresh)
        points.append((total.fa, total.pd))
    return points


@dataclass
class EvalReport:
    iou: float
    niou: float
    pd: float
    fa: float
    roc: list = field(default_factory=list)
    per_scene: list = field(default_factory=list)


def evaluate_confidences(confs, masks, thresh=0.5, thresholds=None, dist_thresh=DEFAULT_MATCH_DISTANCE):
    """Headline metrics at ``thresh`` plus a ROC over ``thresholds``.

    ``per_scene`` rows hold (iou, DetectionCounts); IoU is pooled over the
    dataset, nIoU averages per image.
    """
    inter = union = 0
    rows, ious, total = [], [], DetectionCounts()
    centers = [mask_centers(m) for m in masks]
    for conf, mask, cen in zip(confs, masks, centers):
        pred, gt = binarize(conf, thresh), _plane(mask).astype(bool)
        inter += np.count_nonzero(pred & gt)
        union += np.count_nonzero(pred | gt)
        iou = pixel_iou(pred, gt)
        counts = match_counts(pred, cen, dist_thresh)
        ious.append(iou)
        rows.append((iou, counts))
        total = total + counts
    curve = roc(confs, centers, thresholds, dist_thresh) if thresholds is not None else []
    pooled = 1.0 if union == 0 else inter / union
    return EvalReport(pooled, float(np.mean(ious)) if ious else 1.0, total.pd, total.fa, curve, rows)
