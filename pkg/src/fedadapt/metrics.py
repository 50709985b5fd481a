"""Classification metrics: accuracy, balanced accuracy, macro-F1, one-vs-rest
macro ROC-AUC, expected calibration error, and decision-curve net benefit.

All functions take an EvalRecords batch (true labels plus full class
probability rows) and are pure; curve data exports as CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_ECE_BINS = 15
DEFAULT_DCA_GRID = np.round(np.arange(0.0, 1.0, 0.01), 2)


@dataclass
class EvalRecords:
    """True labels with class-probability rows; predictions are argmax."""

    labels: np.ndarray   # n true label ids
    probs: np.ndarray    # n x K probability rows

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"probs must be 2-D, got shape {self.probs.shape}")
        n, k = self.probs.shape
        if self.labels.shape != (n,):
            raise ValueError("one label per probability row required")
        if n == 0:
            raise ValueError("empty record batch")
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        sums = self.probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("probability rows must sum to 1 within 1e-6")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)


def accuracy(records: EvalRecords) -> float:
    return float((records.predicted == records.labels).mean())


def balanced_accuracy(records: EvalRecords) -> float:
    """Unweighted mean recall over the classes present in the true labels."""
    pred = records.predicted
    recalls = []
    for cls in np.unique(records.labels):
        mask = records.labels == cls
        recalls.append(float((pred[mask] == cls).mean()))
    return float(np.mean(recalls))


def macro_f1(records: EvalRecords) -> float:
    """Mean per-class F1 over classes present in the true labels; a class
    with zero precision+recall contributes 0."""
    pred = records.predicted
    scores = []
    for cls in np.unique(records.labels):
        tp = int(((pred == cls) & (records.labels == cls)).sum())
        fp = int(((pred == cls) & (records.labels != cls)).sum())
        fn = int(((pred != cls) & (records.labels == cls)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        denom = precision + recall
        scores.append(2.0 * precision * recall / denom if denom else 0.0)
    return float(np.mean(scores))


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    ranks = _midranks(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _binary_roc_curve(scores: np.ndarray, positive: np.ndarray):
    """Staircase (fpr, tpr) points, thresholds descending, endpoints included."""
    order = np.argsort(-scores, kind="stable")
    pos_sorted = positive[order].astype(np.float64)
    scores_sorted = scores[order]
    tps = np.cumsum(pos_sorted)
    fps = np.cumsum(1.0 - pos_sorted)
    # keep only the last point of each tied-score run
    keep = np.append(scores_sorted[1:] != scores_sorted[:-1], True)
    tps, fps = tps[keep], fps[keep]
    n_pos = float(positive.sum())
    n_neg = float(positive.size - positive.sum())
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return fpr, tpr


def roc_auc_macro(records: EvalRecords):
    """One-vs-rest AUC per class (midrank tie handling), macro averaged.

    Classes with no positives or no negatives in the batch are skipped,
    mirroring the absent-class convention of the other macro metrics.
    Returns (macro_auc, {class_id: (fpr, tpr)}).
    """
    curves = {}
    aucs = []
    for cls in range(records.n_classes):
        positive = records.labels == cls
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == records.labels.size:
            continue
        scores = records.probs[:, cls]
        aucs.append(_binary_auc(scores, positive))
        curves[cls] = _binary_roc_curve(scores, positive)
    if not aucs:
        raise ValueError("no class with both positives and negatives")
    return float(np.mean(aucs)), curves


@dataclass
class ReliabilityBins:
    """Equal-width confidence bins on [0, 1]; empty bins report zeros."""

    n_bins: int
    mean_confidence: np.ndarray
    bin_accuracy: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) / self.n_bins


def ece(records: EvalRecords, n_bins: int = DEFAULT_ECE_BINS):
    """Expected calibration error over max-probability confidence bins."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = records.confidence
    correct = (records.predicted == records.labels).astype(np.float64)
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.zeros(n_bins)
    conf_sum = np.zeros(n_bins)
    correct_sum = np.zeros(n_bins)
    np.add.at(counts, idx, 1.0)
    np.add.at(conf_sum, idx, conf)
    np.add.at(correct_sum, idx, correct)
    filled = counts > 0
    mean_conf = np.where(filled, conf_sum / np.maximum(counts, 1.0), 0.0)
    bin_acc = np.where(filled, correct_sum / np.maximum(counts, 1.0), 0.0)
    n = records.labels.size
    value = float((counts[filled] / n * np.abs(bin_acc[filled] - mean_conf[filled])).sum())
    return value, ReliabilityBins(n_bins, mean_conf, bin_acc, counts)


def dca_net_benefit(records: EvalRecords, thresholds=None):
    """Net benefit TP/n - (FP/n) * t/(1-t) per threshold, one-vs-rest.

    Thresholds must lie in [0, 1); the default grid is 0.00 to 0.99 in steps
    of 0.01. Returns (thresholds, macro curve, per-class matrix K x T).
    """
    thresholds = DEFAULT_DCA_GRID if thresholds is None else np.asarray(
        thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("empty threshold grid")
    if thresholds.min() < 0.0 or thresholds.max() >= 1.0:
        raise ValueError("thresholds must lie in [0, 1)")
    n = records.labels.size
    k = records.n_classes
    per_class = np.zeros((k, thresholds.size))
    for cls in range(k):
        positive = records.labels == cls
        scores = records.probs[:, cls]
        for ti, t in enumerate(thresholds):
            flagged = scores >= t
            tp = float((flagged & positive).sum())
            fp = float((flagged & ~positive).sum())
            per_class[cls, ti] = tp / n - (fp / n) * (t / (1.0 - t))
    return thresholds, per_class.mean(axis=0), per_class


# ---------------------------------------------------------------------------
# CSV exports


def write_roc_csv(path, curves) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "fpr", "tpr"])
        for cls in sorted(curves):
            fpr, tpr = curves[cls]
            for x, y in zip(fpr, tpr):
                w.writerow([cls, f"{x:.10g}", f"{y:.10g}"])


def write_reliability_csv(path, bins: ReliabilityBins) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_center", "confidence", "accuracy", "count"])
        for center, conf, acc, count in zip(bins.centers, bins.mean_confidence,
                                            bins.bin_accuracy, bins.counts):
            w.writerow([f"{center:.10g}", f"{conf:.10g}", f"{acc:.10g}", int(count)])


def write_dca_csv(path, thresholds, net_benefit) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "net_benefit"])
        for t, nb in zip(thresholds, net_benefit):
            w.writerow([f"{t:.10g}", f"{nb:.10g}"])
