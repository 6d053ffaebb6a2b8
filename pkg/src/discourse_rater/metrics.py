"""Agreement metrics and evaluation summaries.

Quadratic weighted kappa (QWK) is the primary metric: chance-corrected
agreement with (i - j)^2 penalties, computed from a confusion matrix of class
indices.  Model-vs-label agreement uses the 7 half-point rating classes;
rater-vs-rater reliability uses the raw 4-point integer scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import stdtr

from .data import DatasetManifest, RaterRecord
from .errors import DataError, UsageError


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns (1-based)."""
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise UsageError(f"truth/pred must be equal-length vectors, got {truth.shape} vs {pred.shape}")
    if truth.size < 1:
        raise UsageError("need at least one scored item")
    for arr, label in ((truth, "truth"), (pred, "pred")):
        if arr.min() < 1 or arr.max() > num_classes:
            raise UsageError(f"{label} indices must lie in 1..{num_classes}")
    counts = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(counts, (truth - 1, pred - 1), 1)
    return counts


def qwk_from_confusion(counts: np.ndarray) -> float:
    """QWK = 1 - sum(w O) / sum(w E), w_ij = (i - j)^2, E from the marginals.

    When expected disagreement is zero the ratio is 0/0; by convention the
    result is 1.0 on perfect agreement and 0.0 otherwise.
    """
    counts = np.asarray(counts, dtype=np.float64)
    k = counts.shape[0]
    idx = np.arange(k, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2
    n = counts.sum()
    expected = np.outer(counts.sum(axis=1), counts.sum(axis=0)) / n
    num = float((w * counts).sum())
    den = float((w * expected).sum())
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return 1.0 - num / den


def qwk(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> float:
    """Quadratic weighted kappa between two class-index sequences."""
    return qwk_from_confusion(confusion_matrix(truth, pred, num_classes))


@dataclass
class IrrResult:
    per_rater: dict[str, float]
    mean: float
    standard_error: float


def irr_leave_one_rater_out(rater_records: Iterable[RaterRecord], component: str,
                            num_classes: int = 4) -> IrrResult:
    """Leave-one-rater-out reliability on the raw integer scores.

    For each rater, their scores pair with the co-rater's score on every
    segment they rated; QWK is computed over those pairs and summarized as
    mean and standard error across raters.
    """
    by_segment: dict[str, list[RaterRecord]] = {}
    raters: dict[str, None] = {}
    for rec in rater_records:
        if rec.component != component:
            continue
        by_segment.setdefault(rec.segment_id, []).append(rec)
        raters.setdefault(rec.rater_id, None)
    if len(raters) < 2:
        raise DataError(f"need at least 2 raters for component {component!r}")
    for segment_id, records in by_segment.items():
        if len(records) != 2 or records[0].rater_id == records[1].rater_id:
            raise DataError(f"segment {segment_id}: expected 2 distinct raters for {component}")

    per_rater: dict[str, float] = {}
    for rater in raters:
        own, others = [], []
        for records in by_segment.values():
            ids = [r.rater_id for r in records]
            if rater in ids:
                mine = records[ids.index(rater)]
                partner = records[1 - ids.index(rater)]
                own.append(int(mine.score))
                others.append(int(partner.score))
        if not own:
            warnings.warn(f"rater {rater!r} has no rated segments for {component}; skipped")
            continue
        per_rater[rater] = qwk(own, others, num_classes)

    values = list(per_rater.values())
    mean, se = fold_summary(values)
    return IrrResult(per_rater=per_rater, mean=mean, standard_error=se)


def fold_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample sd over sqrt(n)); SE is 0 for n = 1."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise UsageError("fold_summary needs at least one value")
    mean = float(values.mean())
    if values.size == 1:
        return mean, 0.0
    se = float(values.std(ddof=1) / np.sqrt(values.size))
    return mean, se


def classroom_aggregate(per_segment_scores: Mapping[str, float],
                        manifest: DatasetManifest) -> dict[str, float]:
    """Mean over segments within each lesson, then over lessons per teacher."""
    seg_info = {s.segment_id: (s.teacher_id, s.lesson_id) for s in manifest.segments}
    per_lesson: dict[str, dict[str, list[float]]] = {}
    for segment_id, score in per_segment_scores.items():
        if segment_id not in seg_info:
            raise DataError(f"segment {segment_id!r} is not in the manifest")
        teacher_id, lesson_id = seg_info[segment_id]
        per_lesson.setdefault(teacher_id, {}).setdefault(lesson_id, []).append(float(score))
    return {
        teacher: float(np.mean([np.mean(scores) for scores in lessons.values()]))
        for teacher, lessons in per_lesson.items()
    }


def pearson_r(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson correlation with a two-tailed t-test p-value (n - 2 df)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError(f"x/y must be equal-length vectors, got {x.shape} vs {y.shape}")
    n = x.size
    if n < 3:
        raise UsageError(f"pearson_r needs at least 3 points, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DataError("correlation undefined: an input has zero variance")
    r = float((dx * dy).sum() / (sx * sy))
    r = min(max(r, -1.0), 1.0)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return r, p


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class ComponentSummary:
    per_fold: list[float]
    mean: float
    standard_error: float


@dataclass
class EvaluationReport:
    """Per-component fold scores plus confusion matrices and raw predictions."""

    components: dict[str, ComponentSummary] = field(default_factory=dict)
    overall: ComponentSummary | None = None
    confusions: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "components": {
                name: {
                    "per_fold": [float(v) for v in summary.per_fold],
                    "mean": summary.mean,
                    "standard_error": summary.standard_error,
                }
                for name, summary in self.components.items()
            },
            "confusion_matrices": {
                name: matrix.tolist() for name, matrix in self.confusions.items()
            },
        }
        if self.overall is not None:
            doc["overall"] = {
                "per_fold": [float(v) for v in self.overall.per_fold],
                "mean": self.overall.mean,
                "standard_error": self.overall.standard_error,
            }
        return doc


def summarize_folds(per_fold_by_component: Mapping[str, Sequence[float]]) -> EvaluationReport:
    """Build a report from fold-wise QWK values per component.

    The overall row averages the components within each fold first, then
    summarizes across folds.
    """
    report = EvaluationReport()
    fold_counts = {len(v) for v in per_fold_by_component.values()}
    if len(fold_counts) != 1:
        raise UsageError("components report different fold counts")
    for name, values in per_fold_by_component.items():
        mean, se = fold_summary(values)
        report.components[name] = ComponentSummary(list(values), mean, se)
    stacked = np.asarray([list(v) for v in per_fold_by_component.values()])
    per_fold_overall = stacked.mean(axis=0)
    mean, se = fold_summary(per_fold_overall)
    report.overall = ComponentSummary([float(v) for v in per_fold_overall], mean, se)
    return report
