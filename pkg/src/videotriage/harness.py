"""Threshold-sweep and evaluation harness over recorded two-stage datasets.

A sweep replays the gate at each requested threshold, producing one row of
(forward volume, quality metrics) per threshold plus two baseline rows: the
first stage alone (forward nothing) and the second stage alone (forward
everything). Because retained items keep stage-1 scores and forwarded items
take stage-2 scores, the threshold endpoints reproduce the baselines
exactly, which anchors the whole table.

Gate comparisons at equal cost are supported by binary-searching the
confidence threshold until its forwarded count matches an entropy row's,
since forward share (not threshold value) is what makes rows comparable.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

from .cascade import BatchReport, run_batch
from .core import LabeledExample
from .gate import GatePolicy
from .metrics import DEFAULT_TARGETS, MetricReport, evaluate_scores

__all__ = [
    "SweepRow",
    "SweepReport",
    "run_sweep",
    "run_eval",
    "matched_confidence_threshold",
    "STAGE1_BASELINE",
    "STAGE2_BASELINE",
]

STAGE1_BASELINE = "stage1_only"
STAGE2_BASELINE = "stage2_only"


@dataclass(frozen=True)
class SweepRow:
    """One operating condition: its gate, cost share, and quality metrics.

    ``tau`` is None on baseline rows (no gate is involved). ``r_at_p`` maps
    precision targets (percent) to the best achievable recall.
    """

    gate: str
    tau: float | None
    forwarded: int
    qps_ratio_pct: float
    f1: float
    r_at_p: dict[float, float]
    max_beta_variance: float | None

    def to_json_dict(self) -> dict:
        return {
            "gate": self.gate,
            "tau": self.tau,
            "forwarded": self.forwarded,
            "qps_ratio_pct": self.qps_ratio_pct,
            "f1": self.f1,
            "r_at_p": {f"{t:g}": v for t, v in sorted(self.r_at_p.items())},
            "max_beta_variance": self.max_beta_variance,
        }


@dataclass(frozen=True)
class SweepReport:
    """Baseline rows plus one row per requested threshold, sorted by τ."""

    baselines: tuple[SweepRow, SweepRow]
    rows: tuple[SweepRow, ...]
    targets: tuple[float, ...]

    @property
    def stage1_only(self) -> SweepRow:
        return self.baselines[0]

    @property
    def stage2_only(self) -> SweepRow:
        return self.baselines[1]

    def all_rows(self) -> tuple[SweepRow, ...]:
        return self.baselines + self.rows

    def to_json_dict(self) -> dict:
        return {
            "targets": [f"{t:g}" for t in self.targets],
            "baselines": {
                STAGE1_BASELINE: self.stage1_only.to_json_dict(),
                STAGE2_BASELINE: self.stage2_only.to_json_dict(),
            },
            "rows": [row.to_json_dict() for row in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def to_csv(self) -> str:
        """Full-precision CSV, one line per row including baselines."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        header = ["gate", "tau", "forwarded", "qps_ratio_pct", "f1"]
        header += [f"r_at_p_{t:g}" for t in self.targets]
        header += ["max_beta_variance"]
        writer.writerow(header)
        for row in self.all_rows():
            record = [
                row.gate,
                "" if row.tau is None else repr(row.tau),
                row.forwarded,
                repr(row.qps_ratio_pct),
                repr(row.f1),
            ]
            record += [repr(row.r_at_p[t]) for t in self.targets]
            record += ["" if row.max_beta_variance is None else repr(row.max_beta_variance)]
            writer.writerow(record)
        return buffer.getvalue()

    def format_table(self) -> str:
        """Human-readable table; percentage columns get one decimal place."""
        headers = ["gate", "tau", "fwd", "qps%", "F1%"]
        headers += [f"R@P{t:g}%" for t in self.targets]
        headers += ["maxvar"]
        lines = []
        for row in self.all_rows():
            cells = [
                row.gate,
                "-" if row.tau is None else f"{row.tau:.4g}",
                str(row.forwarded),
                f"{row.qps_ratio_pct:.1f}",
                f"{100.0 * row.f1:.1f}",
            ]
            cells += [f"{100.0 * row.r_at_p[t]:.1f}" for t in self.targets]
            cells += [
                "-" if row.max_beta_variance is None else f"{row.max_beta_variance:.2e}"
            ]
            lines.append(cells)
        widths = [
            max(len(headers[i]), *(len(line[i]) for line in lines))
            for i in range(len(headers))
        ]
        def fmt(cells):
            return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(headers)] + [fmt(line) for line in lines])


def _positive_scores(examples: Sequence[LabeledExample], stage: str) -> list[float]:
    if stage == "stage1":
        return [ex.stage1.positive for ex in examples]
    scores = []
    for ex in examples:
        if ex.stage2 is None:
            raise ValueError(f"example {ex.item.id!r} has no stage-2 score")
        scores.append(ex.stage2.positive)
    return scores


def _labels(examples: Sequence[LabeledExample]) -> list[int]:
    return [ex.label for ex in examples]


def _metric_row(
    gate: str,
    tau: float | None,
    forwarded: int,
    qps_ratio_pct: float,
    scores: Sequence[float],
    labels: Sequence[int],
    targets: Sequence[float],
) -> SweepRow:
    report = evaluate_scores(scores, labels, targets)
    return SweepRow(
        gate=gate,
        tau=tau,
        forwarded=forwarded,
        qps_ratio_pct=qps_ratio_pct,
        f1=report.f1,
        r_at_p=dict(report.r_at_p),
        max_beta_variance=report.max_beta_variance,
    )


def _cascade_row(
    gate: str,
    tau: float,
    batch: BatchReport,
    labels: Sequence[int],
    targets: Sequence[float],
) -> SweepRow:
    finals = [r.final.positive for r in batch.results]
    return _metric_row(
        gate, tau, batch.forwarded, batch.qps_ratio_pct, finals, labels, targets
    )


def matched_confidence_threshold(
    examples: Sequence[LabeledExample], target_forwarded: int, iterations: int = 80
) -> float:
    """Confidence threshold whose forwarded count best matches the target.

    Forwarding (positive-class probability >= c) is non-increasing in c, so
    bisect on the count. With distinct scores the match is exact; heavy
    score ties can leave the nearest achievable count further away, and the
    caller should report the actual count alongside.
    """
    p1 = [ex.stage1.positive for ex in examples]

    def forwarded_at(c: float) -> int:
        return sum(1 for p in p1 if p >= c)

    lo, hi = 0.0, 1.0
    if forwarded_at(hi) >= target_forwarded:
        return hi
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        if forwarded_at(mid) > target_forwarded:
            lo = mid
        else:
            hi = mid
    return hi


def run_sweep(
    examples: Sequence[LabeledExample],
    taus: Sequence[float],
    targets: Sequence[float] = DEFAULT_TARGETS,
    gate_kind: str = "entropy",
    stage1_cost: float = 1.0,
    stage2_cost: float = 10.0,
) -> SweepReport:
    """Replay the gate at each threshold and attach quality metrics per row.

    gate_kind selects the row family: "entropy" or "confidence" threshold
    the respective score at each τ; "both" emits, per τ, the entropy row
    plus a confidence row whose threshold is searched so its forwarded
    count matches the entropy row's (cost-matched comparison).
    """
    if not examples:
        raise ValueError("cannot sweep an empty dataset")
    if gate_kind not in ("entropy", "confidence", "both"):
        raise ValueError(f"unknown gate_kind {gate_kind!r}")
    targets = tuple(targets)
    labels = _labels(examples)
    n = len(examples)

    stage1_scores = _positive_scores(examples, "stage1")
    stage2_scores = _positive_scores(examples, "stage2")
    baselines = (
        _metric_row(STAGE1_BASELINE, None, 0, 0.0, stage1_scores, labels, targets),
        _metric_row(STAGE2_BASELINE, None, n, 100.0, stage2_scores, labels, targets),
    )

    rows: list[SweepRow] = []
    for tau in sorted(taus):
        if gate_kind in ("entropy", "both"):
            batch = run_batch(
                examples, GatePolicy.entropy(tau), stage1_cost, stage2_cost
            )
            rows.append(_cascade_row("entropy", tau, batch, labels, targets))
        if gate_kind == "confidence":
            batch = run_batch(
                examples, GatePolicy.confidence(tau), stage1_cost, stage2_cost
            )
            rows.append(_cascade_row("confidence", tau, batch, labels, targets))
        if gate_kind == "both":
            matched = matched_confidence_threshold(examples, rows[-1].forwarded)
            batch = run_batch(
                examples, GatePolicy.confidence(matched), stage1_cost, stage2_cost
            )
            rows.append(_cascade_row("confidence", matched, batch, labels, targets))
    return SweepReport(baselines=baselines, rows=tuple(rows), targets=targets)


def run_eval(
    examples: Sequence[LabeledExample],
    which: str = "cascade",
    tau: float = 0.6,
    targets: Sequence[float] = DEFAULT_TARGETS,
    stage1_cost: float = 1.0,
    stage2_cost: float = 10.0,
) -> tuple[MetricReport, BatchReport | None]:
    """Metrics for one operating condition.

    which="stage1"/"stage2" scores that stage alone (no batch report);
    which="cascade" replays the entropy gate at τ and reports both the
    metrics and the gate volume.
    """
    labels = _labels(examples)
    targets = tuple(targets)
    if which == "stage1":
        return evaluate_scores(_positive_scores(examples, "stage1"), labels, targets), None
    if which == "stage2":
        return evaluate_scores(_positive_scores(examples, "stage2"), labels, targets), None
    if which != "cascade":
        raise ValueError(f"unknown evaluation target {which!r}")
    batch = run_batch(examples, GatePolicy.entropy(tau), stage1_cost, stage2_cost)
    finals = [r.final.positive for r in batch.results]
    return evaluate_scores(finals, labels, targets), batch
