"""Metrics and selection procedures.

IoU over binary masks, precision/recall/F1 at a score threshold, the
exhaustive F1-optimal threshold sweep over observed scores, top-k caption
accuracy, and the dataset-level masking report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .segmenter import Mask


@dataclass(frozen=True)
class ScoredSample:
    """One scored image: its best similarity and whether top-1 was right."""

    sample_id: str
    score: float
    correct: bool

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"sample {self.sample_id!r} has non-finite score")


@dataclass(frozen=True)
class ThresholdReport:
    """Chosen operating point plus the full sweep table."""

    threshold: float
    f1: float
    table: tuple[tuple[float, float, float, float], ...]  # (theta, P, R, F1)


def iou(pred: Mask, truth: Mask) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise DimensionError(
            f"mask dims differ: {pred.height}x{pred.width} vs "
            f"{truth.height}x{truth.width}")
    inter = int(np.logical_and(pred.pixels, truth.pixels).sum())
    union = int(np.logical_or(pred.pixels, truth.pixels).sum())
    if union == 0:
        return 1.0
    return inter / union


def pr_f1(samples: list[ScoredSample], threshold: float) -> tuple[float, float, float]:
    """Precision/recall/F1 when predicting present iff score >= threshold.

    Zero-denominator precision or recall counts as 0, as does F1 when
    P + R = 0.
    """
    if not samples:
        raise ValueError("pr_f1 needs at least one sample")
    tp = sum(1 for s in samples if s.correct and s.score >= threshold)
    fp = sum(1 for s in samples if not s.correct and s.score >= threshold)
    fn = sum(1 for s in samples if s.correct and s.score < threshold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def optimal_threshold(samples: list[ScoredSample]) -> ThresholdReport:
    """Sweep the observed scores and keep the F1 maximizer (ties: smallest).

    Any threshold between consecutive scores yields the same confusion
    matrix, so evaluating at the scores themselves is exhaustive.
    """
    if not samples:
        raise ValueError("optimal_threshold needs at least one sample")
    candidates = sorted({s.score for s in samples})
    table = []
    best = None
    for theta in candidates:
        precision, recall, f1 = pr_f1(samples, theta)
        table.append((theta, precision, recall, f1))
        if best is None or f1 > best[1]:
            best = (theta, f1)
    return ThresholdReport(threshold=best[0], f1=best[1], table=tuple(table))


def topk_accuracy(score_matrix: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label lands in the k best-scoring columns.

    Ties prefer the lower caption index (stable descending sort).
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise DimensionError(
            f"scores {scores.shape} incompatible with labels {labels.shape}")
    n, c = scores.shape
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DimensionError("labels must index the caption axis")
    if k >= c:
        return 1.0
    hits = 0
    for row, label in zip(scores, labels):
        order = np.argsort(-row, kind="stable")
        if label in order[:k]:
            hits += 1
    return hits / n


def evaluate_masking(entries, config, modes=("single", "multi", "box"),
                     captions: list[str] | None = None) -> dict:
    """Dataset-level report: per-sample IoU by prompt mode, mean IoU per
    mode, the F1 threshold sweep and top-1/top-5 caption accuracy.

    Entries without a ground-truth mask are excluded from IoU and listed.
    Runs the pipeline with the similarity gate disabled (diagnostic mode):
    the caption is ground truth here, so gating would only hide mask
    quality.  Floats are rounded to 6 decimals and rows ordered by id, so
    identical inputs produce byte-identical reports.
    """
    from dataclasses import replace

    from .pipeline import Pipeline  # local import: pipeline depends on metrics

    if not entries:
        raise ValueError("evaluate_masking needs a nonempty dataset")
    for mode in modes:
        if mode not in ("single", "multi", "box"):
            raise ValueError(f"unknown prompt mode {mode!r}")
    pipeline = Pipeline(replace(config, similarity_gate=-1.0))
    results = pipeline.run_entries(entries, modes=modes)

    caption_set = captions if captions is not None else sorted(
        {e.caption for e in entries})
    caption_index = {c: i for i, c in enumerate(caption_set)}
    score_rows = []
    labels = []
    scored_samples = []
    for entry in sorted(entries, key=lambda e: e.id):
        row = pipeline.caption_scores(entry, caption_set)
        score_rows.append(row)
        labels.append(caption_index[entry.caption])
        best = int(np.argmax(row))  # ties resolve to the lower index
        scored_samples.append(ScoredSample(
            sample_id=entry.id, score=float(row[best]),
            correct=best == caption_index[entry.caption]))
    matrix = np.vstack(score_rows)
    top1 = topk_accuracy(matrix, labels, 1)
    top5 = topk_accuracy(matrix, labels, min(5, len(caption_set)))
    sweep = optimal_threshold(scored_samples)

    by_id = {e.id: e for e in entries}
    missing = sorted(e.id for e in entries if e.mask is None)
    per_sample = []
    by_kind: dict[str, list[float]] = {mode: [] for mode in modes}
    for (sample_id, mode), result in sorted(results.items()):
        entry = by_id[sample_id]
        if entry.mask is None:
            continue
        truth = pipeline.truth_mask(entry)
        value = iou(result.mask, truth) if result.mask is not None else 0.0
        per_sample.append({"id": sample_id, "prompt_kind": mode,
                           "iou": round(value, 6)})
        by_kind[mode].append(value)

    report = {
        "per_sample": per_sample,
        "mean_iou_by_kind": {
            mode: round(float(np.mean(vals)), 6) if vals else 0.0
            for mode, vals in by_kind.items()},
        "threshold_report": {
            "threshold": round(sweep.threshold, 6),
            "f1": round(sweep.f1, 6),
            "table": [[round(v, 6) for v in row] for row in sweep.table],
        },
        "accuracy": {"top1": round(top1, 6), "top5": round(top5, 6)},
        "excluded": {"missing_mask": missing},
    }
    return report
