"""Pixel-level evaluation: confusion counts, Se/Sp/Acc, ROC and AUROC.

Ratios with an empty denominator return ``None`` ("undefined") rather than
0.0.  All functions accept an optional field-of-view mask restricting which
pixels are counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.tn + other.tn, self.fn + other.fn,
        )


def _validate_binary(arr: np.ndarray, name: str):
    if not np.all((arr == 0) | (arr == 1)):
        raise ShapeError(f"{name} must be binary (0/1)")


def _select(a: np.ndarray, fov) -> np.ndarray:
    a = np.asarray(a)
    if fov is None:
        return a.reshape(-1)
    fov = np.asarray(fov)
    if fov.shape != a.shape:
        raise ShapeError(f"fov shape {fov.shape} != array shape {a.shape}")
    _validate_binary(fov, "fov mask")
    return a.reshape(-1)[fov.reshape(-1) == 1]


def confusion(pred_bin, gt, fov=None) -> ConfusionCounts:
    pred_bin = np.asarray(pred_bin)
    gt = np.asarray(gt)
    if pred_bin.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred_bin.shape} vs {gt.shape}")
    _validate_binary(pred_bin, "prediction")
    _validate_binary(gt, "ground truth")
    p = _select(pred_bin, fov).astype(bool)
    g = _select(gt, fov).astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def sensitivity(c: ConfusionCounts):
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def specificity(c: ConfusionCounts):
    denom = c.tn + c.fp
    return c.tn / denom if denom else None


def accuracy(c: ConfusionCounts):
    return (c.tp + c.tn) / c.total if c.total else None


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.uint8)


def auroc(scores, gt, fov=None):
    """Rank-based (Mann-Whitney) AUROC with midrank tie handling.

    Equals the trapezoidal area under the exact threshold-swept ROC curve.
    Returns None when only one class is present.
    """
    gt = np.asarray(gt)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != gt.shape:
        raise ShapeError(f"shape mismatch {scores.shape} vs {gt.shape}")
    _validate_binary(gt, "ground truth")
    s = _select(scores, fov)
    g = _select(gt, fov).astype(bool)
    p = int(np.count_nonzero(g))
    n = g.size - p
    if p == 0 or n == 0:
        return None
    ranks = rankdata(s)  # midranks
    return (ranks[g].sum() - p * (p + 1) / 2.0) / (p * n)


def roc_curve(scores, gt, fov=None):
    """Threshold-swept ROC as ordered (threshold, tpr, fpr) points.

    Includes the (0,0) and (1,1) endpoints; tpr and fpr are non-decreasing
    along the list.
    """
    gt = np.asarray(gt)
    scores = np.asarray(scores, dtype=np.float64)
    _validate_binary(gt, "ground truth")
    s = _select(scores, fov)
    g = _select(gt, fov).astype(bool)
    p = int(np.count_nonzero(g))
    n = g.size - p
    if p == 0 or n == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    g_sorted = g[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < g_sorted.size:
        thr = s_sorted[i]
        while i < g_sorted.size and s_sorted[i] == thr:
            if g_sorted[i]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((float(thr), tp / p, fp / n))
    return points


def roc_auc_trapezoid(points) -> float:
    area = 0.0
    for (_, t0, f0), (_, t1, f1) in zip(points, points[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    return area


def image_metrics(scores, gt, fov=None, threshold: float = 0.5) -> dict:
    c = confusion(binarize(scores, threshold), gt, fov)
    return {
        "counts": c,
        "sensitivity": sensitivity(c),
        "specificity": specificity(c),
        "accuracy": accuracy(c),
        "auroc": auroc(scores, gt, fov),
    }


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def dataset_report(per_image: list) -> dict:
    """Micro (pooled counts) and macro (mean per-image) aggregates."""
    if not per_image:
        raise ShapeError("dataset_report needs at least one image")
    pooled = ConfusionCounts()
    for m in per_image:
        pooled = pooled + m["counts"]
    return {
        "n_images": len(per_image),
        "micro": {
            "sensitivity": sensitivity(pooled),
            "specificity": specificity(pooled),
            "accuracy": accuracy(pooled),
        },
        "macro": {
            "sensitivity": _mean_defined(m["sensitivity"] for m in per_image),
            "specificity": _mean_defined(m["specificity"] for m in per_image),
            "accuracy": _mean_defined(m["accuracy"] for m in per_image),
            "auroc": _mean_defined(m["auroc"] for m in per_image),
        },
    }
