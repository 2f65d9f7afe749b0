"""Imbalance-aware evaluation: AP, FPR at a TPR, max Youden's J, PAvPU, mIoU.

Scores follow the "higher = more anomalous" convention. A pixel is flagged
*uncertain* at threshold ``t`` when ``score > t``; equivalently the metric
sweeps descend through the distinct scores and flag everything at or above
the current one. Positives are OoD (or misclassified) pixels, label 1;
negatives are label 0; label 255 is ignored.

Two accumulator backends share the same finalisers: ``exact`` keeps every
(score, label) pair, ``histogram`` keeps per-bin positive/negative counts
and is mergeable across shards.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ScoreRangeError, UndefinedMetric
from .numerics import atomic_write

POSITIVE = 1
NEGATIVE = 0
IGNORE = 255
DEFAULT_BINS = 2**16


class BinaryEvalAccumulator:
    """Mergeable store of scored binary labels."""

    def __init__(
        self,
        mode: str = "exact",
        bins: int = DEFAULT_BINS,
        score_range: tuple[float, float] = (0.0, 1.0),
        clamp: bool = False,
    ):
        if mode not in ("exact", "histogram"):
            raise ContractViolation(f"unknown accumulator mode {mode!r}")
        lo, hi = map(float, score_range)
        if mode == "histogram" and not (hi > lo and bins >= 1):
            raise ContractViolation("histogram needs hi > lo and bins >= 1")
        self.mode = mode
        self.bins = int(bins)
        self.score_range = (lo, hi)
        self.clamp = clamp
        self.positive_count = 0
        self.negative_count = 0
        self.ignored_count = 0
        self._scores: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        self._hist = np.zeros(2 * self.bins, dtype=np.int64) if mode == "histogram" else None

    # -- building -----------------------------------------------------------

    def empty_like(self) -> "BinaryEvalAccumulator":
        return BinaryEvalAccumulator(self.mode, self.bins, self.score_range, self.clamp)

    def add(self, scores, labels) -> "BinaryEvalAccumulator":
        scores = np.asarray(scores)
        labels = np.asarray(labels)
        if scores.shape != labels.shape:
            raise ContractViolation(f"score shape {scores.shape} != label shape {labels.shape}")
        scores = scores.reshape(-1)
        labels = labels.reshape(-1)
        pos = labels == POSITIVE
        neg = labels == NEGATIVE
        valid = pos | neg
        n_valid = int(valid.sum())
        s = scores[valid].astype(np.float64, copy=False)
        y = pos[valid]
        if not np.all(np.isfinite(s)):
            raise ScoreRangeError("non-finite scores", int(np.sum(~np.isfinite(s))))
        if self.mode == "histogram":
            lo, hi = self.score_range
            outside = (s < lo) | (s > hi)
            n_out = int(outside.sum())
            if n_out and not self.clamp:
                raise ScoreRangeError(
                    f"{n_out} pixel scores fall outside [{lo}, {hi}]; enable clamping or widen the range",
                    n_out,
                )
            idx = np.floor((s - lo) * (self.bins / (hi - lo))).astype(np.int64)
            np.clip(idx, 0, self.bins - 1, out=idx)
            key = 2 * idx + y
            self._hist += np.bincount(key, minlength=2 * self.bins)
        else:
            self._scores.append(s.copy())
            self._labels.append(y.copy())
        npos = int(y.sum())
        self.positive_count += npos
        self.negative_count += n_valid - npos
        self.ignored_count += int(labels.size - n_valid)
        return self

    def merge(self, other: "BinaryEvalAccumulator") -> "BinaryEvalAccumulator":
        if (self.mode, self.bins, self.score_range) != (other.mode, other.bins, other.score_range):
            raise ContractViolation("cannot merge accumulators with different configurations")
        out = self.empty_like()
        out.positive_count = self.positive_count + other.positive_count
        out.negative_count = self.negative_count + other.negative_count
        out.ignored_count = self.ignored_count + other.ignored_count
        if self.mode == "histogram":
            out._hist = self._hist + other._hist
        else:
            out._scores = self._scores + other._scores
            out._labels = self._labels + other._labels
        return out

    __add__ = merge

    # -- views ---------------------------------------------------------------

    @property
    def positive_hist(self) -> np.ndarray:
        return self._hist[1::2]

    @property
    def negative_hist(self) -> np.ndarray:
        return self._hist[0::2]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mode != "exact":
            raise ContractViolation("raw pairs are only kept in exact mode")
        if not self._scores:
            return np.zeros(0), np.zeros(0, dtype=bool)
        return np.concatenate(self._scores), np.concatenate(self._labels)

    def ranked_counts(self):
        """Cumulative ``(tp, fp, thresholds)`` over descending score groups.

        Entry ``k`` counts every sample with score >= ``thresholds[k]``
        (exact) or in bins at or above bin ``k`` (histogram, threshold = bin
        lower edge). Tied scores form a single group.
        """
        if self.mode == "exact":
            s, y = self.pairs()
            if len(s) == 0:
                return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
            order = np.argsort(-s, kind="stable")
            s_sorted = s[order]
            tp_all = np.cumsum(y[order], dtype=np.int64)
            ends = np.r_[np.flatnonzero(s_sorted[1:] != s_sorted[:-1]), len(s) - 1]
            tp = tp_all[ends]
            fp = ends + 1 - tp
            return tp, fp, s_sorted[ends]
        pos = self.positive_hist[::-1]
        neg = self.negative_hist[::-1]
        keep = (pos + neg) > 0
        lo, hi = self.score_range
        edges = lo + (hi - lo) * np.arange(self.bins)[::-1] / self.bins
        return np.cumsum(pos)[keep], np.cumsum(neg)[keep], edges[keep]


def accumulate(acc: BinaryEvalAccumulator, scores, labels) -> BinaryEvalAccumulator:
    return acc.add(scores, labels)


def accumulate_parallel(
    template: BinaryEvalAccumulator, items: Iterable[tuple[np.ndarray, np.ndarray]], jobs: int = 1
) -> BinaryEvalAccumulator:
    """Accumulate ``(scores, labels)`` shards on ``jobs`` threads, then merge."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        acc = template.empty_like()
        for s, y in items:
            acc.add(s, y)
        return acc
    shards = [items[i::jobs] for i in range(jobs)]

    def run(shard):
        acc = template.empty_like()
        for s, y in shard:
            acc.add(s, y)
        return acc

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(run, shards))
    out = parts[0]
    for p in parts[1:]:
        out = out.merge(p)
    return out


# ---------------------------------------------------------------------------
# finalisers
# ---------------------------------------------------------------------------


def _need(acc: BinaryEvalAccumulator, positives=True, negatives=False):
    if positives and acc.positive_count == 0:
        raise UndefinedMetric("metric undefined without positive samples")
    if negatives and acc.negative_count == 0:
        raise UndefinedMetric("metric undefined without negative samples")


def average_precision(acc: BinaryEvalAccumulator) -> float:
    """Step-rule AP: sum over score groups of recall increment times precision."""
    _need(acc)
    tp, fp, _ = acc.ranked_counts()
    recall = tp / acc.positive_count
    precision = tp / (tp + fp)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def fpr_at_tpr(acc: BinaryEvalAccumulator, tpr_target: float = 0.95) -> float:
    """FPR at the first (highest) threshold whose TPR reaches ``tpr_target``."""
    _need(acc, positives=True, negatives=True)
    tp, fp, _ = acc.ranked_counts()
    tpr = tp / acc.positive_count
    k = int(np.argmax(tpr >= tpr_target))
    return float(fp[k] / acc.negative_count)


def max_youden_j(acc: BinaryEvalAccumulator, return_threshold: bool = False):
    """``max_t TPR(t) - FPR(t)``; the empty flag set (J = 0) is always a candidate.

    With ``return_threshold`` also returns the lowest score flagged uncertain
    at the optimum (``inf`` when nothing is flagged).
    """
    _need(acc, positives=True, negatives=True)
    tp, fp, thr = acc.ranked_counts()
    j = tp / acc.positive_count - fp / acc.negative_count
    best = int(np.argmax(j)) if len(j) else 0
    if len(j) == 0 or j[best] <= 0.0:
        value, threshold = 0.0, float("inf")
    else:
        value, threshold = float(j[best]), float(thr[best])
    return (value, threshold) if return_threshold else value


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray

    def ap(self) -> float:
        return float(np.sum(np.diff(np.r_[0.0, self.recall]) * self.precision))

    def to_json(self) -> dict:
        return {
            "recall": [float(v) for v in self.recall],
            "precision": [float(v) for v in self.precision],
            "thresholds": [float(v) for v in self.thresholds],
        }


def pr_curve(acc: BinaryEvalAccumulator) -> PrCurve:
    _need(acc)
    tp, fp, thr = acc.ranked_counts()
    return PrCurve(tp / acc.positive_count, tp / (tp + fp), thr)


def pavpu(uncertainty, correctness, threshold: float, ignore=None) -> float:
    """Fraction of pixels that are accurate-and-certain or inaccurate-and-uncertain.

    ``correctness`` is 1 for accurate, 0 for inaccurate; an optional boolean
    ``ignore`` mask (or 255 entries in ``correctness``) drops pixels. A pixel
    is certain when its score is <= ``threshold``.
    """
    u = np.asarray(uncertainty, dtype=np.float64)
    c = np.asarray(correctness)
    if u.shape != c.shape:
        raise ContractViolation("uncertainty and correctness shapes differ")
    valid = c != IGNORE
    if ignore is not None:
        valid &= ~np.asarray(ignore, dtype=bool)
    n_total = int(valid.sum())
    if n_total == 0:
        raise UndefinedMetric("PAvPU of an empty pixel set")
    accurate = c == 1
    certain = u <= threshold
    good = (accurate & certain) | (~accurate & ~certain)
    return float(np.sum(good & valid) / n_total)


def pavpu_from_acc(acc: BinaryEvalAccumulator, threshold: float) -> float:
    """PAvPU from a misclassification accumulator (positives = inaccurate pixels)."""
    total = acc.positive_count + acc.negative_count
    if total == 0:
        raise UndefinedMetric("PAvPU of an empty pixel set")
    tp, fp, thr = acc.ranked_counts()
    flagged = thr > threshold
    k = np.flatnonzero(flagged)
    tp_t = int(tp[k[-1]]) if len(k) else 0
    fp_t = int(fp[k[-1]]) if len(k) else 0
    return (tp_t + acc.negative_count - fp_t) / total


def pavpu_at_max_j(acc: BinaryEvalAccumulator) -> float:
    """PAvPU of the flag set that maximises Youden's J."""
    _need(acc, positives=True, negatives=True)
    tp, fp, _ = acc.ranked_counts()
    j = tp / acc.positive_count - fp / acc.negative_count
    total = acc.positive_count + acc.negative_count
    if len(j) == 0 or j.max() <= 0.0:
        return acc.negative_count / total
    k = int(np.argmax(j))
    return float((tp[k] + acc.negative_count - fp[k]) / total)


def confusion_matrix(pred, gt, n_classes: int, ignore_label: int = IGNORE) -> np.ndarray:
    """``(C, C)`` counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractViolation("prediction and ground truth shapes differ")
    keep = (gt != ignore_label) & (gt >= 0) & (gt < n_classes)
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if np.any((p < 0) | (p >= n_classes)):
        raise ContractViolation("prediction holds class ids outside [0, C)")
    return np.bincount(g * n_classes + p, minlength=n_classes**2).reshape(n_classes, n_classes)


def miou(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ContractViolation("confusion matrix must be square and non-empty")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not np.any(present):
        raise UndefinedMetric("mIoU undefined for an empty confusion matrix")
    return float(np.mean(tp[present] / union[present]))


def summarize(acc: BinaryEvalAccumulator, tpr_target: float = 0.95) -> dict:
    j, t = max_youden_j(acc, return_threshold=True)
    return {
        "AP": average_precision(acc),
        "FPR@95TPR": fpr_at_tpr(acc, tpr_target),
        "maxJ": j,
        "threshold_maxJ": t,
        "positives": acc.positive_count,
        "negatives": acc.negative_count,
        "ignored": acc.ignored_count,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("method", "dataset", "AP", "FPR@95TPR", "maxJ", "PAvPU@t*", "mIoU")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(path_csv, path_json, rows: Sequence[dict], curves: dict[str, PrCurve]) -> None:
    atomic_write(path_csv, report_csv(rows).encode("utf-8"))
    payload = {name: curve.to_json() for name, curve in sorted(curves.items())}
    atomic_write(path_json, (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))
