"""Shared domain types and validation used by every other module.

All types here are immutable after construction and safe to share across
threads. Probability vectors are stored exactly as given: normalization is
never applied silently, so malformed inputs fail loudly at the boundary
instead of masking upstream bugs in model clients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

PROB_SUM_TOL = 1e-9


class TriageError(Exception):
    """Base class for all errors raised by this package."""


class ProbVectorError(TriageError, ValueError):
    """A raw probability vector violates one of the ProbVector invariants."""


class TooShortError(ProbVectorError):
    """Fewer than two classes."""


class OutOfRangeError(ProbVectorError):
    """An entry lies outside [0, 1]."""


class NotNormalizedError(ProbVectorError):
    """Entries do not sum to 1 within tolerance."""


class DatasetError(TriageError):
    """A dataset file could not be parsed; carries the offending line number."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ProbVector:
    """Normalized class-probability distribution.

    Class 0 is conventionally the negative class and class 1 the positive
    class for binary tasks. Invariants (checked at construction): every
    entry in [0, 1], entries sum to 1 within 1e-9, length >= 2.
    """

    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.probs) < 2:
            raise TooShortError(f"need at least 2 classes, got {len(self.probs)}")
        for p in self.probs:
            if not (0.0 <= p <= 1.0):
                raise OutOfRangeError(f"probability {p!r} outside [0, 1]")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise NotNormalizedError(f"probabilities sum to {total!r}, expected 1")

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, i: int) -> float:
        return self.probs[i]

    def __iter__(self) -> Iterator[float]:
        return iter(self.probs)

    @property
    def positive(self) -> float:
        """Positive-class probability (class index 1)."""
        return self.probs[1]


def validate_prob_vector(raw: Sequence[float]) -> ProbVector:
    """Build a ProbVector from raw values, rejecting anything invalid.

    Raises TooShortError, OutOfRangeError, or NotNormalizedError. The input
    is never renormalized.
    """
    return ProbVector(tuple(raw))


@dataclass(frozen=True)
class VideoItem:
    """A video with its identity, metadata, and optional precomputed features.

    ``metadata`` maps string keys (e.g. "vv" for the view count) to finite
    numbers. ``features`` holds a FeatureBundle when the item is scored by
    the in-process fusion model; it is opaque to this module.
    """

    id: str
    metadata: Mapping[str, float] = field(default_factory=dict)
    features: Any = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("VideoItem.id must be non-empty")
        meta = dict(self.metadata)
        for key, value in meta.items():
            if not math.isfinite(float(value)):
                raise ValueError(f"metadata[{key!r}] is not finite: {value!r}")
        object.__setattr__(self, "metadata", meta)


@dataclass(frozen=True)
class LabeledExample:
    """A video with recorded stage-1 (and optionally stage-2) scores and a label."""

    item: VideoItem
    stage1: ProbVector
    stage2: ProbVector | None
    label: int

    def __post_init__(self):
        if not (0 <= self.label < len(self.stage1)):
            raise ValueError(
                f"label {self.label} out of range for {len(self.stage1)} classes"
            )
        if self.stage2 is not None and len(self.stage2) != len(self.stage1):
            raise ValueError(
                f"stage2 has {len(self.stage2)} classes, stage1 has {len(self.stage1)}"
            )


@dataclass(frozen=True)
class ModelOutput:
    """A single classifier call: its distribution, identity, and abstract cost."""

    probs: ProbVector
    model_id: str
    cost_units: float

    def __post_init__(self):
        if self.cost_units < 0:
            raise ValueError(f"cost_units must be >= 0, got {self.cost_units}")


# --------------------------------------------------------------------------
# Dataset file format: one JSON object per line with fields `id`, `stage1`,
# `stage2` (optional), `label`, `metadata`.
# --------------------------------------------------------------------------


def example_to_dict(example: LabeledExample) -> dict:
    record: dict[str, Any] = {
        "id": example.item.id,
        "stage1": list(example.stage1),
    }
    if example.stage2 is not None:
        record["stage2"] = list(example.stage2)
    record["label"] = example.label
    record["metadata"] = dict(example.item.metadata)
    return record


def example_from_dict(record: Mapping[str, Any]) -> LabeledExample:
    stage2 = record.get("stage2")
    return LabeledExample(
        item=VideoItem(id=record["id"], metadata=record.get("metadata", {})),
        stage1=validate_prob_vector(record["stage1"]),
        stage2=None if stage2 is None else validate_prob_vector(stage2),
        label=int(record["label"]),
    )


def write_dataset(path: str, examples: Sequence[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example_to_dict(example)) + "\n")


def read_dataset(path: str) -> list[LabeledExample]:
    """Read a JSONL dataset; parse and validation errors carry line numbers."""
    examples = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                example = example_from_dict(record)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(path, lineno, str(exc)) from exc
            if example.item.id in seen:
                raise DatasetError(path, lineno, f"duplicate id {example.item.id!r}")
            seen.add(example.item.id)
            examples.append(example)
    return examples
