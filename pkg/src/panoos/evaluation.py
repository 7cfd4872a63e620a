"""Pixel-level anomaly metrics (AuPRC, FPR95) and closed-set mIoU.

Pixels are pooled across every map passed in; outlier pixels are positives,
inlier pixels negatives and ignore pixels are dropped. The threshold sweep
visits each distinct score once, so tied pixels enter the prediction set
together.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .synthdata import IGNORE, OUTLIER, read_manifest, read_raster


@dataclass
class PRCurve:
    thresholds: np.ndarray  # distinct scores, descending
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return self.tp / self.n_pos

    tpr = recall

    @property
    def fpr(self):
        return self.fp / self.n_neg

    def __len__(self):
        return len(self.thresholds)


@dataclass
class EvalReport:
    auprc: float
    fpr95: float
    miou: float
    per_class_iou: np.ndarray
    n_inlier: int
    n_outlier: int
    n_ignored: int

    def rows(self):
        out = [("auprc", self.auprc), ("fpr95", self.fpr95), ("miou", self.miou)]
        out += [(f"iou_class_{k}", v) for k, v in enumerate(self.per_class_iou)]
        out += [("n_inlier", self.n_inlier), ("n_outlier", self.n_outlier), ("n_ignored", self.n_ignored)]
        return out

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for k, v in self.rows():
            lines.append(f"{k},{v if isinstance(v, int) else repr(float(v))}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            f"AuPRC   {100 * self.auprc:8.3f} %",
            f"FPR95   {100 * self.fpr95:8.3f} %",
            f"mIoU    {100 * self.miou:8.3f} %",
        ]
        for k, v in enumerate(self.per_class_iou):
            lines.append(f"  class {k:3d} IoU {'   n/a' if np.isnan(v) else f'{100 * v:6.2f}'}")
        lines.append(f"pixels: {self.n_inlier} inlier, {self.n_outlier} outlier, {self.n_ignored} ignored")
        return "\n".join(lines) + "\n"


def _pool(scores, labels):
    if isinstance(scores, np.ndarray) and isinstance(labels, np.ndarray):
        scores, labels = [scores], [labels]
    s = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in scores])
    l = np.concatenate([np.asarray(x).reshape(-1) for x in labels])
    if s.shape != l.shape:
        raise EvaluationError(f"{s.size} scores for {l.size} labels")
    return s, l


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall at every distinct score, highest threshold first."""
    s, l = _pool(scores, labels)
    keep = l != IGNORE
    s, pos = s[keep], l[keep] == OUTLIER
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0:
        raise EvaluationError("undefined recall: no outlier pixels")
    if n_neg == 0:
        raise EvaluationError("undefined false-positive rate: no inlier pixels")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores contain non-finite values")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(pos)[ends]
    fp = (ends + 1) - tp
    return PRCurve(s[ends], tp.astype(np.int64), fp.astype(np.int64), n_pos, n_neg)


def auprc(curve: PRCurve) -> float:
    """Step integral sum_j (recall_j - recall_{j-1}) * precision_j."""
    # recall steps from integer counts, so no cancellation between floats
    dr = np.diff(np.r_[0, curve.tp]) / curve.n_pos
    return math.fsum(dr * curve.precision)


def fpr95(curve: PRCurve) -> float:
    """FPR at the highest threshold whose TPR reaches 95 %."""
    j = int(np.argmax(20 * curve.tp >= 19 * curve.n_pos))
    return float(curve.fp[j] / curve.n_neg)


def miou(pred_labels, gt_labels, num_classes):
    """Mean IoU over classes present in prediction or ground truth.

    Outlier and ignore pixels in ``gt_labels`` are excluded. Returns
    ``(miou, per_class)`` with NaN for classes absent from both.
    """
    p, g = _pool(pred_labels, gt_labels)
    keep = g < num_classes
    bad = (g >= num_classes) & (g != OUTLIER) & (g != IGNORE)
    if bad.any():
        raise EvaluationError(f"ground-truth label {int(g[bad][0])} outside 0..{num_classes - 1}")
    if not keep.any():
        raise EvaluationError("no evaluable pixels")
    p, g = p[keep].astype(np.int64), g[keep].astype(np.int64)
    inter = np.bincount(g[p == g], minlength=num_classes)[:num_classes]
    area_p = np.bincount(p, minlength=num_classes)[:num_classes]
    area_g = np.bincount(g, minlength=num_classes)[:num_classes]
    union = area_p + area_g - inter
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return math.fsum(iou[present]) / int(present.sum()), iou


def evaluate_maps(scores, labels, preds, num_classes=None) -> EvalReport:
    s, l = _pool(scores, labels)
    if num_classes is None:
        seen = np.concatenate([l[l < OUTLIER], np.concatenate([np.asarray(x).reshape(-1) for x in preds])])
        num_classes = int(seen.max()) + 1 if seen.size else 1
    curve = pr_curve(s, l)
    m, per_class = miou(preds, labels, num_classes)
    return EvalReport(
        auprc=auprc(curve),
        fpr95=fpr95(curve),
        miou=m,
        per_class_iou=per_class,
        n_inlier=curve.n_neg,
        n_outlier=curve.n_pos,
        n_ignored=int((l == IGNORE).sum()),
    )


def score_name(label_file: str, suffix: str) -> str:
    return os.path.basename(label_file).split(".")[0] + suffix


def evaluate_run(score_dir, label_dir, manifest, num_classes=None) -> EvalReport:
    """Pool every scene in ``manifest`` (in order) and compute the report."""
    scores, labels, preds = [], [], []
    for _, label_file in read_manifest(manifest):
        labels.append(read_raster(os.path.join(label_dir, label_file), "label"))
        scores.append(read_raster(os.path.join(score_dir, score_name(label_file, ".score.posm")), "score"))
        preds.append(read_raster(os.path.join(score_dir, score_name(label_file, ".pred.posl")), "label"))
    if not labels:
        raise EvaluationError(f"manifest {manifest} lists no scenes")
    return evaluate_maps(scores, labels, preds, num_classes)
