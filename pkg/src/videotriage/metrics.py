"""Binary classification evaluation: PR operating points, recall-at-precision,
best F1, and Beta-variance uncertainty.

Scores are positive-class probabilities and an item is classified positive
when its score >= threshold. One operating point exists per distinct score
value: tied scores cannot be split by any threshold, so they collapse into a
single point. Thresholds run high to low, which makes recall non-decreasing
along the curve.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

from .core import TriageError


class LengthMismatchError(TriageError):
    """scores and labels differ in length."""


class NoPositivesError(TriageError):
    """A PR curve needs at least one positive label."""


class NoQualifyingPointError(TriageError):
    """No operating point satisfied any of the requested precision targets."""


@dataclass(frozen=True)
class OperatingPoint:
    """Confusion counts and precision/recall at one threshold."""

    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float

    @property
    def f1(self) -> float:
        if self.precision + self.recall == 0.0:
            return 0.0
        return 2.0 * self.precision * self.recall / (self.precision + self.recall)


@dataclass(frozen=True)
class PRCurve:
    """Operating points sorted by descending threshold.

    Checked invariants: thresholds strictly decreasing, recall non-decreasing,
    and counts consistent point-to-point (identical positive and overall
    totals everywhere).
    """

    points: tuple[OperatingPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ValueError("PRCurve needs at least one operating point")
        n_pos = self.points[0].tp + self.points[0].fn
        n = n_pos + self.points[0].fp + self.points[0].tn
        previous = None
        for point in self.points:
            if point.tp + point.fn != n_pos or point.tp + point.fp + point.fn + point.tn != n:
                raise ValueError("inconsistent counts between operating points")
            if previous is not None:
                if point.threshold >= previous.threshold:
                    raise ValueError("thresholds must strictly decrease")
                if point.recall < previous.recall:
                    raise ValueError("recall must be non-decreasing")
            previous = point

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> PRCurve:
    """Build the PR curve with one operating point per distinct score.

    Raises LengthMismatchError on unequal lengths and NoPositivesError when
    no label is 1. Labels must be 0 or 1.
    """
    if len(scores) != len(labels):
        raise LengthMismatchError(
            f"{len(scores)} scores vs {len(labels)} labels"
        )
    if len(scores) == 0:
        raise ValueError("cannot build a PR curve from no scores")
    for label in labels:
        if label not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {label!r}")
    n_pos = sum(labels)
    if n_pos == 0:
        raise NoPositivesError("need at least one positive label")
    n_neg = len(labels) - n_pos

    pairs = sorted(zip(scores, labels), key=lambda sl: sl[0], reverse=True)
    points = []
    tp = 0
    fp = 0
    i = 0
    while i < len(pairs):
        threshold = pairs[i][0]
        # consume the whole tie group: every item at this score classifies together
        while i < len(pairs) and pairs[i][0] == threshold:
            tp += pairs[i][1]
            fp += 1 - pairs[i][1]
            i += 1
        points.append(
            OperatingPoint(
                threshold=threshold,
                tp=tp,
                fp=fp,
                fn=n_pos - tp,
                tn=n_neg - fp,
                precision=tp / (tp + fp),
                recall=tp / n_pos,
            )
        )
    return PRCurve(points=tuple(points))


def recall_at_precision(curve: PRCurve, target_pct: float) -> float:
    """Maximum recall over operating points with precision >= target_pct/100.

    Returns 0.0 when no point qualifies. ``target_pct`` must lie in (0, 100].
    """
    if not (0.0 < target_pct <= 100.0):
        raise ValueError(f"target_pct must be in (0, 100], got {target_pct}")
    target = target_pct / 100.0
    best = 0.0
    for point in curve:
        if point.precision >= target and point.recall > best:
            best = point.recall
    return best


def f1_best(curve: PRCurve) -> tuple[float, float]:
    """(max F1 over operating points, its threshold); ties go to the higher threshold."""
    best_f1 = -1.0
    best_threshold = curve.points[0].threshold
    for point in curve:  # descending threshold, so strict > keeps the higher one
        f1 = point.f1
        if f1 > best_f1:
            best_f1 = f1
            best_threshold = point.threshold
    return best_f1, best_threshold


def beta_variance(tp: int, fp: int) -> float:
    """Variance of a Beta(tp+1, fp+1) posterior over the true-positive proportion.

    With a = tp+1 and b = fp+1 this is a*b / ((a+b)^2 * (a+b+1)); it peaks at
    1/12 for tp = fp = 0 and shrinks as evidence accumulates.
    """
    if tp < 0 or fp < 0:
        raise ValueError("counts must be >= 0")
    a = tp + 1
    b = fp + 1
    return (a * b) / ((a + b) ** 2 * (a + b + 1))


def _realizing_point(curve: PRCurve, target_pct: float) -> OperatingPoint | None:
    """The operating point whose recall realizes recall_at_precision(target).

    Among qualifying points that achieve the maximum recall, the one with the
    highest threshold (fewest false positives) is chosen.
    """
    target = target_pct / 100.0
    best: OperatingPoint | None = None
    for point in curve:  # descending threshold: first at max recall wins
        if point.precision >= target and (best is None or point.recall > best.recall):
            best = point
    return best


def max_beta_variance(curve: PRCurve, targets_pct: Sequence[float]) -> float:
    """Maximum Beta variance over the operating points realizing each R@P target.

    Targets with no qualifying point are skipped; if every target is skipped,
    NoQualifyingPointError is raised.
    """
    variances = []
    for target_pct in targets_pct:
        if not (0.0 < target_pct <= 100.0):
            raise ValueError(f"target_pct must be in (0, 100], got {target_pct}")
        point = _realizing_point(curve, target_pct)
        if point is not None:
            variances.append(beta_variance(point.tp, point.fp))
    if not variances:
        raise NoQualifyingPointError(
            f"no operating point reaches any of the precision targets {list(targets_pct)}"
        )
    return max(variances)


DEFAULT_TARGETS = (50.0, 60.0, 70.0, 80.0, 90.0)


@dataclass(frozen=True)
class MetricReport:
    """The standard metric row: best F1, R@P at each target, max Beta variance.

    ``max_beta_variance`` is None (JSON null, empty CSV cell) when no
    operating point reached any precision target; the field itself is always
    present.
    """

    f1: float
    f1_threshold: float
    r_at_p: dict[float, float]
    max_beta_variance: float | None

    def to_json_dict(self) -> dict:
        return {
            "f1": self.f1,
            "f1_threshold": self.f1_threshold,
            "r_at_p": {f"{t:g}": r for t, r in self.r_at_p.items()},
            "max_beta_variance": self.max_beta_variance,
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["metric", "target_pct", "value"])
        writer.writerow(["f1", "", repr(self.f1)])
        writer.writerow(["f1_threshold", "", repr(self.f1_threshold)])
        for target, recall in self.r_at_p.items():
            writer.writerow(["r_at_p", f"{target:g}", repr(recall)])
        variance = "" if self.max_beta_variance is None else repr(self.max_beta_variance)
        writer.writerow(["max_beta_variance", "", variance])
        return buffer.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


def evaluate_scores(
    scores: Sequence[float],
    labels: Sequence[int],
    targets_pct: Sequence[float] = DEFAULT_TARGETS,
) -> MetricReport:
    """Compute the full metric report for one score column."""
    curve = pr_curve(scores, labels)
    f1, threshold = f1_best(curve)
    r_at_p = {t: recall_at_precision(curve, t) for t in targets_pct}
    try:
        variance = max_beta_variance(curve, targets_pct)
    except NoQualifyingPointError:
        variance = None
    return MetricReport(
        f1=f1, f1_threshold=threshold, r_at_p=r_at_p, max_beta_variance=variance
    )
