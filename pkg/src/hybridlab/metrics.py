"""Detection and open-set segmentation metrics.

Ranking metrics group tied scores as a single threshold and use exact
integer counts, so they agree bit-for-bit with brute-force pair-counting
oracles. Detection everywhere means `score > threshold` (strict).

The open-set confusion tally is a (K+1) x (K+1) count matrix over the K
inlier classes plus the anomaly label K; VOID ground truth contributes
to nothing.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import VOID, open_set_predict


def _validate_detection(scores, is_outlier):
    scores = np.asarray(scores, dtype=np.float64)
    is_outlier = np.asarray(is_outlier, dtype=bool)
    if scores.shape != is_outlier.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not (is_outlier.any() and (~is_outlier).any()):
        raise ValueError("need at least one outlier and one inlier")
    return scores, is_outlier


def _tie_groups(scores, is_outlier):
    """Distinct score values (descending) with per-group outlier/inlier
    counts."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    out = is_outlier[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    values = s[starts]
    n_out = np.add.reduceat(out.astype(np.int64), starts)
    n_in = (ends - starts) - n_out
    return values, n_out, n_in


def average_precision(scores, is_outlier):
    """Area under precision-recall via the rectangle rule over the recall
    increments at each distinct threshold."""
    scores, is_outlier = _validate_detection(scores, is_outlier)
    _, g_out, g_in = _tie_groups(scores, is_outlier)
    total_out = int(is_outlier.sum())
    tp = fp = 0
    recall_prev = 0.0
    terms = []
    for o, i in zip(g_out, g_in):
        tp += int(o)
        fp += int(i)
        precision = tp / (tp + fp)
        recall = tp / total_out
        terms.append((recall - recall_prev) * precision)
        recall_prev = recall
    return math.fsum(terms)


def auroc(scores, is_outlier):
    """Mann-Whitney statistic: P(outlier score > inlier score) plus half
    the tie probability, computed by midranks."""
    scores, is_outlier = _validate_detection(scores, is_outlier)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    out_sorted = is_outlier[order]
    n_out = int(is_outlier.sum())
    n_in = is_outlier.size - n_out
    u = math.fsum(ranks[out_sorted]) - 0.5 * n_out * (n_out + 1)
    return u / (n_out * n_in)


def fpr_at_tpr(scores, is_outlier, target=0.95):
    """(FPR, threshold) at the largest threshold whose TPR reaches the
    target; falls back to min(score) - 1 when only detecting everything
    reaches it."""
    scores, is_outlier = _validate_detection(scores, is_outlier)
    values, g_out, g_in = _tie_groups(scores, is_outlier)
    n_out = int(is_outlier.sum())
    n_in = is_outlier.size - n_out
    tp_above = np.concatenate([[0], np.cumsum(g_out)[:-1]])
    fp_above = np.concatenate([[0], np.cumsum(g_in)[:-1]])
    for v, tp, fp in zip(values, tp_above, fp_above):
        if tp / n_out >= target:
            return fp / n_in, float(v)
    return 1.0, float(values[-1] - 1.0)


def calibrate_threshold(scores, is_outlier, target=0.95):
    """Threshold for open_set_predict achieving the target TPR on
    held-out detection samples."""
    return fpr_at_tpr(scores, is_outlier, target)[1]


# -- confusion tallies ---------------------------------------------------------

@dataclass
class ConfusionTally:
    counts: np.ndarray   # (K+1, K+1); rows ground truth, cols prediction
    n_void: int = 0

    @property
    def n_classes(self):
        return self.counts.shape[0] - 1

    def merge(self, other):
        if other.counts.shape != self.counts.shape:
            raise ValueError("tally shapes differ")
        return ConfusionTally(self.counts + other.counts,
                              self.n_void + other.n_void)


def confusion_tally(pred, gt, n_classes):
    """Count matrix over {0..K-1, K}; VOID ground truth is skipped."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != VOID
    counts = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    np.add.at(counts, (gt[keep], pred[keep]), 1)
    return ConfusionTally(counts, int((~keep).sum()))


def _per_class_ratio(tally, tp_weight):
    counts = tally.counts
    k = tally.n_classes
    values = np.full(k, np.nan)
    for c in range(k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        denom = tp_weight * tp + fp + fn
        if denom > 0:
            values[c] = tp_weight * tp / denom
    return values


def _nan_mean(values):
    valid = values[~np.isnan(values)]
    if valid.size == 0:
        raise ValueError("no class present in prediction or ground truth")
    return float(np.mean(valid))


def open_iou(tally):
    """Per-class open-set IoU and the mean over the K inlier classes.

    False anomaly detections count against the classes: a class-k
    prediction at an anomaly is a false positive for k, an anomaly
    prediction at ground-truth k is a false negative for k. Classes
    absent from both sides are excluded from the mean.
    """
    if tally.counts.sum() == 0:
        raise ValueError("empty tally")
    per_class = _per_class_ratio(tally, 1)
    return per_class, _nan_mean(per_class)


def mean_f1(tally):
    """Mean per-class F1 over the K inlier classes with the same
    open-set false positive/negative accounting as open_iou."""
    if tally.counts.sum() == 0:
        raise ValueError("empty tally")
    return _nan_mean(_per_class_ratio(tally, 2))


def closed_miou(pred, gt, n_classes):
    """Standard mIoU over inlier-labelled elements (VOID and anomaly
    ground truth excluded)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = (gt != VOID) & (gt < n_classes)
    if not keep.any():
        raise ValueError("no inlier-labelled elements")
    counts = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    np.add.at(counts, (gt[keep], np.minimum(pred[keep], n_classes)), 1)
    return _nan_mean(_per_class_ratio(ConfusionTally(counts), 1))


def open_gap(closed, open_miou_value):
    """Closed-set mIoU minus open-set mIoU."""
    return closed - open_miou_value


# -- fold-swapped calibration ---------------------------------------------------

@dataclass
class EvalFold:
    name: str
    images: list   # (closed_pred, scores, gt) triples


def _fold_samples(fold, n_classes):
    scores, labels = [], []
    for _, s, gt in fold.images:
        keep = np.asarray(gt).ravel() != VOID
        scores.append(np.asarray(s, dtype=np.float64).ravel()[keep])
        labels.append(np.asarray(gt).ravel()[keep] == n_classes)
    return np.concatenate(scores), np.concatenate(labels)


def cross_calibrated_open_miou(folds, n_classes, target=0.95):
    """Open-mIoU with the threshold of every fold calibrated on the other
    folds, aggregated with image-count weights.

    Returns (overall, rows) where rows hold (name, threshold, open_miou,
    n_images) per fold.
    """
    if len(folds) < 2:
        raise ValueError("need at least two folds")
    rows = []
    weighted = []
    for i, fold in enumerate(folds):
        others = [f for j, f in enumerate(folds) if j != i]
        calib_scores = np.concatenate([_fold_samples(f, n_classes)[0]
                                       for f in others])
        calib_labels = np.concatenate([_fold_samples(f, n_classes)[1]
                                       for f in others])
        thr = calibrate_threshold(calib_scores, calib_labels, target)
        tally = None
        for closed_pred, scores, gt in fold.images:
            pred = open_set_predict(closed_pred, scores, thr, n_classes).labels
            t = confusion_tally(pred, gt, n_classes)
            tally = t if tally is None else tally.merge(t)
        _, miou = open_iou(tally)
        rows.append((fold.name, thr, miou, len(fold.images)))
        weighted.append((miou, len(fold.images)))
    total = sum(w for _, w in weighted)
    overall = sum(m * w for m, w in weighted) / total
    return overall, rows


# -- CSV emission -----------------------------------------------------------------

METRIC_COLUMNS = ("metric", "split", "value", "threshold", "seed")


def write_metrics_csv(path, rows):
    """Rows are (metric, split, value, threshold, seed) tuples; floats are
    written with shortest round-trip formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    return path


def _format(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)
