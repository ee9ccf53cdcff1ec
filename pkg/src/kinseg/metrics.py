"""Segmentation metrics with ignore regions, and ROC analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_mask

__all__ = [
    "ConfusionCounts",
    "confusion",
    "accuracy",
    "precision",
    "recall",
    "iou_score",
    "summarize",
    "roc_curve",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(pred, gt, ignore=None) -> ConfusionCounts:
    """Pixel counts over the image minus ``ignore``."""
    pred = check_mask(pred, name="pred")
    gt = check_mask(gt, shape=pred.shape, name="gt")
    valid = np.ones(pred.shape, bool) if ignore is None else ~check_mask(ignore, shape=pred.shape, name="ignore")
    p, g = pred & valid, gt & valid
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(valid)) - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int, errors: int) -> float:
    # empty denominator: perfect if there was nothing to get wrong, else 0
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, c.fp + c.fn)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c.fp)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c.fn)


def iou_score(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c.fp + c.fn)


def summarize(c: ConfusionCounts) -> dict:
    """Metrics in the order accuracy, IoU, recall, precision."""
    return {"accuracy": accuracy(c), "iou": iou_score(c), "recall": recall(c), "precision": precision(c)}


def roc_curve(scores, gts, ignore=None):
    """ROC points over all distinct thresholds and the trapezoidal AUC.

    ``scores`` and ``gts`` are single maps or lists of maps; ``ignore`` is a
    mask or a list of masks (or None).  Tied scores move together.  Returns
    ``(fpr, tpr, thresholds), auc``; the curve starts at (0, 0).
    """
    if isinstance(scores, np.ndarray) and scores.ndim == 2:
        scores, gts = [scores], [gts]
        ignore = [ignore]
    if ignore is None or isinstance(ignore, np.ndarray):
        ignore = [ignore] * len(scores)
    s_all, g_all = [], []
    for s, g, ig in zip(scores, gts, ignore):
        s = np.asarray(s, dtype=float)
        g = check_mask(g, shape=s.shape, name="gt")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        keep = np.ones(s.shape, bool) if ig is None else ~check_mask(ig, shape=s.shape, name="ignore")
        s_all.append(s[keep])
        g_all.append(g[keep])
    s = np.concatenate(s_all)
    g = np.concatenate(g_all)
    n_pos = int(g.sum())
    n_neg = len(g) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC is undefined when the ground truth holds a single class")
    order = np.argsort(-s, kind="stable")
    s, g = s[order], g[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(g)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.trapezoid(tpr, fpr))
    return (fpr, tpr, thresholds), auc
