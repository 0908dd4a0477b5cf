"""Uncertainty scoring and routing policies for the two-stage cascade.

A gate looks at a stage-1 distribution (and optionally item metadata) and
decides whether the item is Forwarded to the expensive stage-2 model or
Retained with its stage-1 score. All policies are immutable and the decision
function is pure, so gates are safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .core import ProbVector, TriageError


class NonBinaryError(TriageError):
    """Confidence gating is defined for binary tasks only."""


class MissingMetadataKeyError(TriageError):
    """A metadata predicate refers to a key the item does not carry."""


def entropy(p: ProbVector) -> float:
    """Shannon entropy of ``p`` in bits, with the convention 0*log(0) = 0.

    Base-2 logarithm: a binary distribution scores in [0, 1], an N-class
    distribution in [0, log2(N)].
    """
    acc = 0.0
    for q in p:
        if q > 0.0:
            acc -= q * math.log2(q)
    return acc


def confidence(p: ProbVector) -> float:
    """Positive-class probability p[1]. Raises NonBinaryError unless len(p) == 2."""
    if len(p) != 2:
        raise NonBinaryError(f"confidence gate needs 2 classes, got {len(p)}")
    return p[1]


class GateKind(str, Enum):
    ENTROPY = "entropy"
    CONFIDENCE = "confidence"
    METADATA = "metadata"
    ALL_OF = "all_of"
    ANY_OF = "any_of"


class GateAction(str, Enum):
    FORWARD = "forward"
    RETAIN = "retain"


@dataclass(frozen=True)
class GateDecision:
    action: GateAction
    score: float
    policy_kind: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"gate score must be finite, got {self.score!r}")

    @property
    def forwarded(self) -> bool:
        return self.action is GateAction.FORWARD


@dataclass(frozen=True)
class GatePolicy:
    """A routing rule: a threshold leaf or a boolean combination of rules.

    Leaves:
      - entropy: Forward iff entropy(stage1) >= threshold (bits).
      - confidence: Forward iff stage1[1] >= threshold. Note the direction:
        this forwards HIGH-confidence positives. The cascade exists to cut
        false positives from a high-recall stage-1 model, so the items it
        flags are exactly the ones worth re-checking.
      - metadata: Forward iff metadata[predicate_key] >= predicate_min.

    Composites: all_of / any_of over ``children``.

    Forward comparisons are inclusive (>=), so an entropy threshold of 0
    forwards everything (a clean stage-2-only limit) and a threshold above
    log2(N) forwards nothing.
    """

    kind: GateKind
    threshold: float | None = None
    predicate_key: str | None = None
    predicate_min: float | None = None
    children: tuple["GatePolicy", ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "kind", GateKind(self.kind))
        object.__setattr__(self, "children", tuple(self.children))
        if self.kind is GateKind.ENTROPY:
            if self.threshold is None or self.threshold < 0:
                raise ValueError("entropy threshold must be >= 0")
        elif self.kind is GateKind.CONFIDENCE:
            if self.threshold is None or not (0.0 <= self.threshold <= 1.0):
                raise ValueError("confidence threshold must be in [0, 1]")
        elif self.kind is GateKind.METADATA:
            if not self.predicate_key or self.predicate_min is None:
                raise ValueError("metadata gate needs predicate_key and predicate_min")
        else:
            if len(self.children) < 1:
                raise ValueError(f"{self.kind.value} needs at least one child")

    # -- constructors -----------------------------------------------------

    @classmethod
    def entropy(cls, threshold: float) -> "GatePolicy":
        return cls(kind=GateKind.ENTROPY, threshold=threshold)

    @classmethod
    def confidence(cls, threshold: float) -> "GatePolicy":
        return cls(kind=GateKind.CONFIDENCE, threshold=threshold)

    @classmethod
    def metadata(cls, key: str, minimum: float) -> "GatePolicy":
        return cls(kind=GateKind.METADATA, predicate_key=key, predicate_min=minimum)

    @classmethod
    def all_of(cls, *children: "GatePolicy") -> "GatePolicy":
        return cls(kind=GateKind.ALL_OF, children=tuple(children))

    @classmethod
    def any_of(cls, *children: "GatePolicy") -> "GatePolicy":
        return cls(kind=GateKind.ANY_OF, children=tuple(children))

    # -- JSON wire format --------------------------------------------------

    def to_json_dict(self) -> dict:
        if self.kind in (GateKind.ENTROPY, GateKind.CONFIDENCE):
            return {"kind": self.kind.value, "threshold": self.threshold}
        if self.kind is GateKind.METADATA:
            return {
                "kind": self.kind.value,
                "predicate_key": self.predicate_key,
                "predicate_min": self.predicate_min,
            }
        return {
            "kind": self.kind.value,
            "children": [child.to_json_dict() for child in self.children],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "GatePolicy":
        try:
            kind = GateKind(data["kind"])
            if kind in (GateKind.ENTROPY, GateKind.CONFIDENCE):
                return cls(kind=kind, threshold=float(data["threshold"]))
            if kind is GateKind.METADATA:
                return cls(
                    kind=kind,
                    predicate_key=data["predicate_key"],
                    predicate_min=float(data["predicate_min"]),
                )
            children = tuple(cls.from_json_dict(c) for c in data["children"])
            return cls(kind=kind, children=children)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"invalid gate policy: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> "GatePolicy":
        return cls.from_json_dict(json.loads(text))


def _evaluate(policy: GatePolicy, stage1: ProbVector, metadata: Mapping[str, float]) -> tuple[bool, float]:
    """Return (forward, score) for a policy node.

    Composite nodes report the first child's score; their first child is
    always evaluated, remaining children short-circuit in order.
    """
    if policy.kind is GateKind.ENTROPY:
        score = entropy(stage1)
        return score >= policy.threshold, score
    if policy.kind is GateKind.CONFIDENCE:
        score = confidence(stage1)
        return score >= policy.threshold, score
    if policy.kind is GateKind.METADATA:
        if policy.predicate_key not in metadata:
            raise MissingMetadataKeyError(
                f"metadata key {policy.predicate_key!r} absent"
            )
        value = float(metadata[policy.predicate_key])
        return value >= policy.predicate_min, value

    first_forward, score = _evaluate(policy.children[0], stage1, metadata)
    if policy.kind is GateKind.ALL_OF:
        forward = first_forward
        for child in policy.children[1:]:
            if not forward:
                break
            forward, _ = _evaluate(child, stage1, metadata)
    else:  # ANY_OF
        forward = first_forward
        for child in policy.children[1:]:
            if forward:
                break
            forward, _ = _evaluate(child, stage1, metadata)
    return forward, score


def decide(
    policy: GatePolicy,
    stage1: ProbVector,
    metadata: Mapping[str, float] | None = None,
) -> GateDecision:
    """Apply ``policy`` to a stage-1 distribution plus item metadata.

    Pure function: identical inputs yield identical decisions. Raises
    MissingMetadataKeyError when an evaluated metadata predicate's key is
    absent.
    """
    forward, score = _evaluate(policy, stage1, metadata or {})
    action = GateAction.FORWARD if forward else GateAction.RETAIN
    return GateDecision(action=action, score=score, policy_kind=policy.kind.value)
