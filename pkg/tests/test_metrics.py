import csv
import io
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from videotriage.metrics import (
    DEFAULT_TARGETS,
    LengthMismatchError,
    MetricReport,
    NoPositivesError,
    NoQualifyingPointError,
    OperatingPoint,
    PRCurve,
    beta_variance,
    evaluate_scores,
    f1_best,
    max_beta_variance,
    pr_curve,
    recall_at_precision,
)

# worked example used across this file:
# scores (.9,.8,.7,.6), labels (1,1,0,1) ->
#   t=0.9: tp=1 fp=0 -> P=1,   R=1/3
#   t=0.8: tp=2 fp=0 -> P=1,   R=2/3
#   t=0.7: tp=2 fp=1 -> P=2/3, R=2/3
#   t=0.6: tp=3 fp=1 -> P=3/4, R=1
SCORES = (0.9, 0.8, 0.7, 0.6)
LABELS = (1, 1, 0, 1)


def brute_force_curve(scores, labels):
    """Independent recount: one point per distinct score, by direct counting."""
    pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        fn = pos - tp
        tn = len(scores) - tp - fp - fn
        points.append(
            OperatingPoint(
                threshold=t, tp=tp, fp=fp, fn=fn, tn=tn,
                precision=tp / (tp + fp), recall=tp / pos,
            )
        )
    return points


def test_pr_curve_worked_example():
    curve = pr_curve(SCORES, LABELS)
    assert [p.threshold for p in curve.points] == [0.9, 0.8, 0.7, 0.6]
    assert [p.precision for p in curve.points] == [1.0, 1.0, 2 / 3, 3 / 4]
    assert [p.recall for p in curve.points] == [1 / 3, 2 / 3, 2 / 3, 1.0]
    assert curve.points == tuple(brute_force_curve(SCORES, LABELS))


def test_pr_curve_collapses_ties():
    curve = pr_curve((0.9, 0.9, 0.5), (1, 0, 1))
    assert len(curve.points) == 2
    assert curve.points[0].tp == 1 and curve.points[0].fp == 1


def test_pr_curve_recall_non_decreasing():
    curve = pr_curve(SCORES, LABELS)
    recalls = [p.recall for p in curve.points]
    assert recalls == sorted(recalls)


def test_pr_curve_errors():
    with pytest.raises(NoPositivesError):
        pr_curve((0.5, 0.6), (0, 0))
    with pytest.raises(LengthMismatchError):
        pr_curve((0.5, 0.6), (1,))
    with pytest.raises(ValueError):
        pr_curve((), ())


def test_recall_at_precision_worked_example():
    curve = pr_curve(SCORES, LABELS)
    assert recall_at_precision(curve, 70.0) == 1.0
    assert recall_at_precision(curve, 80.0) == 2 / 3
    assert recall_at_precision(curve, 100.0) == 2 / 3
    assert recall_at_precision(curve, 50.0) == 1.0


def test_recall_at_precision_no_qualifying_point():
    curve = pr_curve((0.9, 0.5), (0, 1))  # best precision is 0.5
    assert recall_at_precision(curve, 90.0) == 0.0


def test_recall_at_precision_target_range():
    curve = pr_curve(SCORES, LABELS)
    with pytest.raises(ValueError):
        recall_at_precision(curve, 0.0)
    with pytest.raises(ValueError):
        recall_at_precision(curve, 101.0)
    recall_at_precision(curve, 100.0)  # inclusive upper end


def test_f1_best_worked_example():
    curve = pr_curve(SCORES, LABELS)
    f1, threshold = f1_best(curve)
    assert f1 == pytest.approx(6 / 7)
    assert threshold == 0.6


def test_f1_best_tie_goes_to_higher_threshold():
    # both thresholds give identical F1; the cheaper (higher) one wins
    curve = pr_curve((0.9, 0.4), (1, 0))
    f1, threshold = f1_best(curve)
    assert f1 == 1.0
    assert threshold == 0.9


def test_beta_variance_known_values():
    assert beta_variance(0, 0) == pytest.approx(1 / 12, abs=1e-15)
    assert beta_variance(9, 1) == pytest.approx(0.010683760683760684, abs=1e-15)
    assert beta_variance(49, 49) == pytest.approx(0.0024752475247524753, abs=1e-15)
    assert beta_variance(3, 1) == pytest.approx(8 / 252, abs=1e-15)


def test_beta_variance_validation():
    with pytest.raises(ValueError):
        beta_variance(-1, 0)
    with pytest.raises(ValueError):
        beta_variance(0, -2)


@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=0, max_value=10_000))
def test_beta_variance_bounds(tp, fp):
    v = beta_variance(tp, fp)
    assert 0.0 < v <= 1 / 12


@given(st.integers(min_value=0, max_value=500))
def test_beta_variance_decreases_with_evidence(k):
    # more counts, same split: narrower posterior
    assert beta_variance(k + 1, k + 1) < beta_variance(k, k)


def test_max_beta_variance_worked_example():
    curve = pr_curve(SCORES, LABELS)
    # targets 50..90 realize at points (3,1), (3,1), (3,1), (2,0), (2,0)
    expected = max(beta_variance(3, 1), beta_variance(2, 0))
    assert max_beta_variance(curve, DEFAULT_TARGETS) == expected


def test_max_beta_variance_skips_unattainable_targets():
    curve = pr_curve((0.9, 0.5), (1, 0))  # precision 1.0 then 0.5
    # 90% target realizes at the first point only
    assert max_beta_variance(curve, (50.0, 90.0)) == max(
        beta_variance(1, 1), beta_variance(1, 0)
    )


def test_max_beta_variance_no_target_attainable():
    curve = pr_curve((0.9, 0.5), (0, 1))  # precision never above 0.5
    with pytest.raises(NoQualifyingPointError):
        max_beta_variance(curve, (90.0,))


def test_evaluate_scores_report():
    report = evaluate_scores(SCORES, LABELS, DEFAULT_TARGETS)
    assert report.f1 == pytest.approx(6 / 7)
    assert report.f1_threshold == 0.6
    assert report.r_at_p[70.0] == 1.0
    assert report.r_at_p[80.0] == 2 / 3
    assert report.max_beta_variance is not None


def test_evaluate_scores_variance_none_when_unattainable():
    report = evaluate_scores((0.9, 0.5), (0, 1), (90.0,))
    assert report.max_beta_variance is None
    assert json.loads(report.to_json())["max_beta_variance"] is None


def test_report_json_csv_value_identical():
    report = evaluate_scores(SCORES, LABELS, DEFAULT_TARGETS)
    parsed = json.loads(report.to_json())
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    by_metric = {}
    for row in rows:
        key = row["metric"] + (":" + row["target_pct"] if row["target_pct"] else "")
        by_metric[key] = row["value"]
    assert float(by_metric["f1"]) == parsed["f1"]
    assert float(by_metric["f1_threshold"]) == parsed["f1_threshold"]
    for target in DEFAULT_TARGETS:
        assert float(by_metric[f"r_at_p:{target:g}"]) == parsed["r_at_p"][f"{target:g}"]
    assert float(by_metric["max_beta_variance"]) == parsed["max_beta_variance"]


def test_pr_curve_matches_brute_force_randomized():
    # small-scale version of the oracle equivalence acceptance check
    import random

    rng = random.Random(1234)
    for _ in range(50):
        n = rng.randint(2, 60)
        labels = [rng.randint(0, 1) for _ in range(n)]
        if not any(labels):
            labels[rng.randrange(n)] = 1
        quantize = rng.random() < 0.5
        scores = [
            round(rng.random(), 1) if quantize else rng.random() for _ in range(n)
        ]
        curve = pr_curve(scores, labels)
        assert list(curve.points) == brute_force_curve(scores, labels)
