"""Compose stage-1 model, gate, and stage-2 model into one classifier.

Two modes exist. ``classify`` drives live classifiers for a single item.
``run_batch`` replays recorded stage-1/stage-2 scores through a gate without
invoking any model; it is the canonical offline-evaluation path and the way
threshold-sweep tables are computed from paired model outputs.

Retained (non-forwarded) items keep their stage-1 score rather than being
forced negative: confident stage-1 predictions are finalized at stage 1,
forwarded ones are overwritten by stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence, runtime_checkable

from sklearn.base import BaseEstimator

from .core import LabeledExample, ModelOutput, ProbVector, TriageError, VideoItem
from .gate import GateDecision, GatePolicy, decide


class StageFailureError(TriageError):
    """A wrapped classifier raised; carries which stage and the cause."""

    def __init__(self, stage: "Stage", cause: Exception):
        super().__init__(f"{stage.value} classifier failed: {cause}")
        self.stage = stage
        self.cause = cause


class MissingStage2ScoreError(TriageError):
    """Replay forwarded an example that has no recorded stage-2 score."""

    def __init__(self, item_id: str):
        super().__init__(f"example {item_id!r} was forwarded but has no stage2 score")
        self.item_id = item_id


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


@runtime_checkable
class Classifier(Protocol):
    """Anything that scores a VideoItem into a distribution plus call cost.

    Implementations must be deterministic for a fixed item unless they
    document otherwise, and thread-safe if used concurrently.
    """

    def score(self, item: VideoItem) -> ModelOutput: ...


@dataclass(frozen=True)
class CascadeResult:
    """Final distribution for one item, with stage attribution and cost.

    ``fallback`` is set when stage 2 was forwarded to but failed, leaving
    the stage-1 result in place; absent that flag, stage_used is Stage2
    exactly when the gate forwarded.
    """

    final: ProbVector
    stage_used: Stage
    gate: GateDecision
    cost_units: float
    fallback: bool = False


@dataclass(frozen=True)
class BatchReport:
    """Gate outcome over a whole dataset: forwarded volume and per-item results."""

    results: tuple[CascadeResult, ...]
    total: int
    forwarded: int
    qps_ratio_pct: float

    @property
    def total_cost_units(self) -> float:
        return sum(r.cost_units for r in self.results)

    def to_json_dict(self, include_results: bool = False) -> dict:
        report: dict = {
            "total": self.total,
            "forwarded": self.forwarded,
            "qps_ratio_pct": self.qps_ratio_pct,
        }
        if include_results:
            report["results"] = [
                {
                    "final_probs": list(r.final),
                    "stage_used": r.stage_used.value,
                    "gate_score": r.gate.score,
                    "cost_units": r.cost_units,
                }
                for r in self.results
            ]
        return report


def classify(
    item: VideoItem,
    stage1: Classifier,
    policy: GatePolicy,
    stage2: Classifier,
) -> CascadeResult:
    """Run the two-stage cascade live on one item.

    Stage 1 always runs; the gate sees its distribution plus the item's
    metadata. Forwarded items are re-scored by stage 2, which determines the
    final distribution and adds its cost. A stage-1 failure propagates as
    StageFailureError; a stage-2 failure falls back to the stage-1 result
    with ``fallback`` set (availability over freshness in a serving path),
    charging only the stage-1 cost since no stage-2 result was produced.
    """
    try:
        first = stage1.score(item)
    except Exception as exc:
        raise StageFailureError(Stage.STAGE1, exc) from exc

    decision = decide(policy, first.probs, item.metadata)
    if not decision.forwarded:
        return CascadeResult(
            final=first.probs,
            stage_used=Stage.STAGE1,
            gate=decision,
            cost_units=first.cost_units,
        )

    try:
        second = stage2.score(item)
    except Exception:
        return CascadeResult(
            final=first.probs,
            stage_used=Stage.STAGE1,
            gate=decision,
            cost_units=first.cost_units,
            fallback=True,
        )
    return CascadeResult(
        final=second.probs,
        stage_used=Stage.STAGE2,
        gate=decision,
        cost_units=first.cost_units + second.cost_units,
    )


def run_batch(
    examples: Sequence[LabeledExample],
    policy: GatePolicy,
    stage1_cost: float = 1.0,
    stage2_cost: float = 10.0,
) -> BatchReport:
    """Replay the gate over recorded scores; no model is invoked.

    Every example must carry stage-1 probs; stage-2 probs are required only
    for the examples the gate actually forwards (MissingStage2ScoreError
    otherwise). The report is deterministic and input-ordered.
    """
    results = []
    forwarded = 0
    for example in examples:
        decision = decide(policy, example.stage1, example.item.metadata)
        if decision.forwarded:
            if example.stage2 is None:
                raise MissingStage2ScoreError(example.item.id)
            forwarded += 1
            results.append(
                CascadeResult(
                    final=example.stage2,
                    stage_used=Stage.STAGE2,
                    gate=decision,
                    cost_units=stage1_cost + stage2_cost,
                )
            )
        else:
            results.append(
                CascadeResult(
                    final=example.stage1,
                    stage_used=Stage.STAGE1,
                    gate=decision,
                    cost_units=stage1_cost,
                )
            )
    total = len(results)
    ratio = 100.0 * forwarded / total if total else 0.0
    return BatchReport(
        results=tuple(results), total=total, forwarded=forwarded, qps_ratio_pct=ratio
    )


# --------------------------------------------------------------------------
# Classifier implementations used to assemble cascades.
# --------------------------------------------------------------------------


class StaticClassifier:
    """Returns a fixed distribution for every item. Test and stub client."""

    def __init__(self, probs: Sequence[float], cost_units: float = 1.0, model_id: str = "static"):
        self.probs = ProbVector(tuple(probs))
        self.cost_units = cost_units
        self.model_id = model_id

    def score(self, item: VideoItem) -> ModelOutput:
        return ModelOutput(probs=self.probs, model_id=self.model_id, cost_units=self.cost_units)


class LookupClassifier:
    """Serves recorded per-item distributions keyed by video id."""

    def __init__(self, probs_by_id: Mapping[str, ProbVector], cost_units: float, model_id: str):
        self.probs_by_id = dict(probs_by_id)
        self.cost_units = cost_units
        self.model_id = model_id

    @classmethod
    def from_examples(
        cls,
        examples: Sequence[LabeledExample],
        stage: Stage,
        cost_units: float | None = None,
    ) -> "LookupClassifier":
        mapping = {}
        for example in examples:
            probs = example.stage1 if stage is Stage.STAGE1 else example.stage2
            if probs is not None:
                mapping[example.item.id] = probs
        if cost_units is None:
            cost_units = 1.0 if stage is Stage.STAGE1 else 10.0
        return cls(mapping, cost_units=cost_units, model_id=f"lookup-{stage.value}")

    def score(self, item: VideoItem) -> ModelOutput:
        if item.id not in self.probs_by_id:
            raise KeyError(f"no recorded score for {item.id!r}")
        return ModelOutput(
            probs=self.probs_by_id[item.id],
            model_id=self.model_id,
            cost_units=self.cost_units,
        )


class CascadeScorer(BaseEstimator):
    """A configured cascade usable wherever a single classifier is expected.

    Bundles the two stage classifiers and the gate policy; ``classify`` runs
    one item through the cascade, ``score`` exposes the whole cascade under
    the Classifier protocol so cascades compose.
    """

    def __init__(self, stage1: Classifier, stage2: Classifier, policy: GatePolicy):
        self.stage1 = stage1
        self.stage2 = stage2
        self.policy = policy

    def classify(self, item: VideoItem) -> CascadeResult:
        return classify(item, self.stage1, self.policy, self.stage2)

    def score(self, item: VideoItem) -> ModelOutput:
        result = self.classify(item)
        return ModelOutput(
            probs=result.final, model_id="cascade", cost_units=result.cost_units
        )


class ReplayScorer:
    """Cascade over recorded scores, for pipelines fed by offline datasets.

    Applies the gate to each item's recorded stage-1 distribution and serves
    the recorded stage-2 distribution when forwarded, mirroring run_batch
    semantics one item at a time.
    """

    def __init__(
        self,
        examples: Sequence[LabeledExample],
        policy: GatePolicy,
        stage1_cost: float = 1.0,
        stage2_cost: float = 10.0,
    ):
        self.policy = policy
        self.stage1_cost = stage1_cost
        self.stage2_cost = stage2_cost
        self._by_id = {ex.item.id: ex for ex in examples}

    def classify(self, item: VideoItem) -> CascadeResult:
        example = self._by_id.get(item.id)
        if example is None:
            raise StageFailureError(
                Stage.STAGE1, KeyError(f"no recorded scores for {item.id!r}")
            )
        decision = decide(self.policy, example.stage1, item.metadata)
        if decision.forwarded:
            if example.stage2 is None:
                raise MissingStage2ScoreError(item.id)
            return CascadeResult(
                final=example.stage2,
                stage_used=Stage.STAGE2,
                gate=decision,
                cost_units=self.stage1_cost + self.stage2_cost,
            )
        return CascadeResult(
            final=example.stage1,
            stage_used=Stage.STAGE1,
            gate=decision,
            cost_units=self.stage1_cost,
        )
