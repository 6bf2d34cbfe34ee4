"""Pixel-level evaluation: F1 on binarized masks and FPR-capped AU-ROC.

Class scores pool pixel counts over all images of the class (not per-image
averages); the mean over classes is an unweighted arithmetic mean.  The
capped AU-ROC integrates the exhaustive threshold-sweep ROC with the FPR
axis clipped at the cap and normalizes by the cap, so a perfect detector
scores 1.0 and a constant detector 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

DEFAULT_FPR_CAP = 0.05


@dataclass(frozen=True)
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        return PixelCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ScoredPair:
    """Real-valued anomaly scores with the matching ground-truth mask."""

    scores: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores)
        gt = np.asarray(self.gt, dtype=bool)
        if scores.shape != gt.shape:
            raise DataError(f"geometry mismatch: scores {scores.shape} vs gt {gt.shape}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "gt", gt)


def accumulate_counts(pred: np.ndarray, gt: np.ndarray) -> PixelCounts:
    """Confusion counts between a predicted and a ground-truth mask."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DataError(f"geometry mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return PixelCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def f1(counts: PixelCounts) -> float:
    """2 * precision * recall / (precision + recall).

    With tp = 0 the quotient is undefined; by convention the score is 0
    unless prediction and ground truth are both entirely empty (then 1).
    """
    if counts.tp == 0:
        return 1.0 if counts.fp == 0 and counts.fn == 0 else 0.0
    precision = counts.tp / (counts.tp + counts.fp)
    recall = counts.tp / (counts.tp + counts.fn)
    return 2.0 * precision * recall / (precision + recall)


def _roc_points(scores: np.ndarray, labels: np.ndarray):
    """Exact ROC vertices over all distinct score thresholds, plus (0, 0)."""
    order = np.argsort(scores, kind="stable")[::-1]
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels, dtype=np.int64)
    cum_fp = np.cumsum(~sorted_labels, dtype=np.int64)
    # keep only the last entry of each run of equal scores
    last = np.flatnonzero(np.diff(sorted_scores) != 0)
    last = np.append(last, sorted_scores.size - 1)
    tpr = np.concatenate(([0.0], cum_tp[last] / cum_tp[-1]))
    fpr = np.concatenate(([0.0], cum_fp[last] / cum_fp[-1]))
    return fpr, tpr


def auroc_capped(pairs: list[ScoredPair], fpr_cap: float = DEFAULT_FPR_CAP) -> float:
    """Area under the pooled ROC for FPR in [0, cap], normalized by the cap.

    The FPR axis is clipped at the cap before the trapezoidal integration,
    which makes a perfect separator score exactly 1.0 and constant scores
    exactly 0.5.
    """
    if not pairs:
        raise DataError("no scored pairs")
    if not 0.0 < fpr_cap <= 1.0:
        raise DataError(f"fpr cap must be in (0, 1], got {fpr_cap}")
    scores = np.concatenate([np.asarray(p.scores, dtype=np.float64).ravel() for p in pairs])
    labels = np.concatenate([p.gt.ravel() for p in pairs])
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataError("AU-ROC needs at least one positive and one negative pixel")
    fpr, tpr = _roc_points(scores, labels)
    fpr = np.minimum(fpr, fpr_cap)
    return float(np.trapezoid(tpr, fpr) / fpr_cap)


@dataclass(frozen=True)
class ClassResult:
    f1: float
    auroc_capped: float
    counts: PixelCounts


def evaluate_class(
    predictions: dict[str, np.ndarray],
    ground_truth: dict[str, np.ndarray],
    score_maps: dict[str, np.ndarray],
    fpr_cap: float = DEFAULT_FPR_CAP,
) -> ClassResult:
    """Pooled pixel metrics for one class.

    ``predictions`` and ``score_maps`` must cover exactly the image ids in
    ``ground_truth``; counts are pooled over all images before computing F1.
    """
    missing = sorted(set(ground_truth) - set(predictions))
    if missing:
        raise DataError(f"missing predictions for images: {missing}")
    missing = sorted(set(ground_truth) - set(score_maps))
    if missing:
        raise DataError(f"missing score maps for images: {missing}")
    extra = sorted(set(predictions) - set(ground_truth))
    if extra:
        raise DataError(f"predictions without ground truth: {extra}")
    counts = PixelCounts()
    pairs = []
    for image_id in sorted(ground_truth):
        gt = ground_truth[image_id]
        counts = counts + accumulate_counts(predictions[image_id], gt)
        pairs.append(ScoredPair(score_maps[image_id], gt))
    return ClassResult(
        f1=f1(counts), auroc_capped=auroc_capped(pairs, fpr_cap), counts=counts
    )


def make_report(per_class: dict[str, ClassResult]) -> dict:
    """JSON-ready evaluation report with unweighted class means."""
    if not per_class:
        raise DataError("no class results to report")
    out = {
        "per_class": {
            name: {
                "f1": res.f1,
                "auroc_capped": res.auroc_capped,
                "counts": {
                    "tp": res.counts.tp,
                    "fp": res.counts.fp,
                    "fn": res.counts.fn,
                    "tn": res.counts.tn,
                },
            }
            for name, res in sorted(per_class.items())
        },
        "mean_f1": float(np.mean([r.f1 for r in per_class.values()])),
        "mean_auroc": float(np.mean([r.auroc_capped for r in per_class.values()])),
    }
    return out


def format_report_table(report: dict) -> str:
    """Plain-text table: one row per class plus the mean row."""
    rows = [("Object", "AU-ROC_0.05", "F1 score")]
    for name, vals in report["per_class"].items():
        rows.append((name, f"{100 * vals['auroc_capped']:.2f}", f"{100 * vals['f1']:.2f}"))
    rows.append(("Mean", f"{100 * report['mean_auroc']:.2f}", f"{100 * report['mean_f1']:.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0 or i == len(rows) - 2:
            lines.append("-" * (sum(widths) + 4))
    return "\n".join(lines)
