"""Binary segmentation metrics: per-image IoU/precision/recall/F1 and the P/R break-even point.

Degenerate denominators follow one convention throughout: if both the
prediction and the ground truth are empty the image is a perfect match (1.0);
otherwise an empty denominator scores 0.0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidDataError

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_masks(cls, pred, gt) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise InvalidDataError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)


def binarize(prob_map, threshold: float = THRESHOLD) -> np.ndarray:
    """Foreground where probability >= threshold."""
    return np.asarray(prob_map) >= threshold


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, both_empty=True)


def precision(c: ConfusionCounts) -> float:
    # no predicted foreground: perfect only if there was nothing to find
    return _ratio(c.tp, c.tp + c.fp, both_empty=c.fn == 0)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, both_empty=c.fp == 0)


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class ImageMetrics:
    image: str
    iou: float
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, image: str, c: ConfusionCounts) -> "ImageMetrics":
        return cls(image, iou(c), precision(c), recall(c), f1(c))


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics]
    miou: float
    mprec: float
    mrec: float
    mf1: float
    pr_break_even: float | None = None
    pr_threshold: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"mIoU": self.miou, "mRec": self.mrec, "mPrec": self.mprec, "F1": self.mf1}
        if self.pr_break_even is not None:
            out["P/R"] = self.pr_break_even
        return out


def mean_metrics(per_image: Sequence[ImageMetrics]) -> MetricsReport:
    """Unweighted mean over images (not pooled over pixels)."""
    if not per_image:
        raise InvalidDataError("cannot average metrics over an empty image list")
    n = len(per_image)
    return MetricsReport(
        per_image=list(per_image),
        miou=sum(m.iou for m in per_image) / n,
        mprec=sum(m.precision for m in per_image) / n,
        mrec=sum(m.recall for m in per_image) / n,
        mf1=sum(m.f1 for m in per_image) / n,
    )


def evaluate_masks(prob_maps: Iterable, gt_masks: Iterable, names: Iterable[str] | None = None,
                   threshold: float = THRESHOLD) -> MetricsReport:
    probs, gts = list(prob_maps), list(gt_masks)
    names = list(names) if names is not None else [str(i) for i in range(len(probs))]
    per = [ImageMetrics.from_counts(n, ConfusionCounts.from_masks(binarize(p, threshold), g))
           for n, p, g in zip(names, probs, gts)]
    return mean_metrics(per)


def pr_break_even(prob_maps, gt_masks) -> tuple[float, float]:
    """Threshold where pooled precision and recall are closest, and their mean there.

    Candidate thresholds are the unique predicted probabilities; a pixel is
    foreground when its score is >= the threshold.  Ties in |P - R| resolve to
    the lowest threshold.
    """
    scores = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in prob_maps])
    gt = np.concatenate([np.asarray(g).astype(bool).ravel() for g in gt_masks])
    if scores.shape != gt.shape:
        raise InvalidDataError("probability maps and masks differ in size")
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise InvalidDataError("P/R break-even needs at least one foreground pixel")

    order = np.argsort(-scores, kind="stable")
    s_sorted, g_sorted = scores[order], gt[order]
    tp_cum = np.cumsum(g_sorted)
    # last index of each run of equal scores = all pixels with score >= that value
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = tp_cum[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    prec = tp / predicted
    rec = tp / n_pos
    gap = np.abs(prec - rec)
    # ends run from highest to lowest threshold; pick the lowest threshold among ties
    best = len(gap) - 1 - int(np.argmin(gap[::-1]))
    return float(s_sorted[ends[best]]), float((prec[best] + rec[best]) / 2)


def write_report_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "iou", "precision", "recall", "f1"])
        for m in report.per_image:
            w.writerow([m.image, f"{m.iou:.6f}", f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
        w.writerow(["mean", f"{report.miou:.6f}", f"{report.mprec:.6f}", f"{report.mrec:.6f}",
                    f"{report.mf1:.6f}"])
