"""Mini-batch ingestion pipeline: Source -> Retriever -> Filter -> Sink over a
key-value index.

The source polls messages in batches and dedups them by video id. The
retriever fetches features, runs the cascade, and produces an index record.
The filter applies an ordered, data-driven rule list ending in a mandatory
default, yielding one of three dispositions: remained (upsert), removed
(delete), ignored (no index mutation). The sink applies the disposition with
bounded retries and appends an audit line for every dispositioned item.

Stages run as a pipeline of threads connected by bounded hand-off queues
holding at most one in-flight batch each; the index serializes its own
mutations, so results are identical to sequential execution of the same
batches. Per-item failures are dead-lettered, never fatal.
"""

from __future__ import annotations

import hashlib
import json
import operator
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

from .core import DatasetError, LabeledExample, TriageError, VideoItem
from .gate import GatePolicy

__all__ = [
    "StreamClosedError",
    "IndexUnavailableError",
    "FeatureFetchFailedError",
    "PublishMessage",
    "MessageStream",
    "stream_from_examples",
    "source_poll",
    "IndexRecord",
    "IndexService",
    "retrieve",
    "Disposition",
    "FilterOutcome",
    "FilterRule",
    "RuleSet",
    "filter_stage",
    "sink_apply",
    "DeadLetter",
    "PipelineConfig",
    "PipelineReport",
    "run_pipeline",
    "load_config",
]


class StreamClosedError(TriageError):
    """Polling a stream after close()."""


class IndexUnavailableError(TriageError):
    """The index rejected a mutation; the sink retries with backoff."""


class FeatureFetchFailedError(TriageError):
    """The feature client could not resolve a video id."""

    def __init__(self, video_id: str, cause: Exception | None = None):
        self.video_id = video_id
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"feature fetch failed for {video_id!r}{detail}")


# --------------------------------------------------------------------------
# Source
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PublishMessage:
    """One publish event: a video id, its metadata payload, and a timestamp."""

    video_id: str
    payload: Mapping[str, float] = field(default_factory=dict)
    event_time: float = 0.0

    def __post_init__(self):
        if not self.video_id:
            raise ValueError("PublishMessage.video_id must be non-empty")
        object.__setattr__(self, "payload", dict(self.payload))


class MessageStream:
    """In-process message source with a persistent consumed offset.

    The offset survives across run_pipeline calls, which is what makes
    stop-and-resume work: a resumed run continues from the first unconsumed
    message.
    """

    def __init__(self, messages: Sequence[PublishMessage] = ()):
        self._messages = list(messages)
        self.offset = 0
        self._closed = False

    @classmethod
    def from_jsonl(cls, path: str) -> "MessageStream":
        """Load a stream file: one {video_id, payload, event_time} per line."""
        messages = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    messages.append(
                        PublishMessage(
                            video_id=record["video_id"],
                            payload=record.get("payload", {}),
                            event_time=float(record.get("event_time", 0.0)),
                        )
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetError(path, lineno, str(exc)) from exc
        return cls(messages)

    def append(self, message: PublishMessage) -> None:
        if self._closed:
            raise StreamClosedError("cannot append to a closed stream")
        self._messages.append(message)

    def close(self) -> None:
        self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    def remaining(self) -> int:
        return len(self._messages) - self.offset

    def take(self, count: int) -> list[PublishMessage]:
        """Consume up to count raw messages, advancing the offset by that many."""
        if self._closed:
            raise StreamClosedError("cannot poll a closed stream")
        chunk = self._messages[self.offset : self.offset + count]
        self.offset += len(chunk)
        return chunk


def stream_from_examples(examples: Sequence[LabeledExample]) -> MessageStream:
    """Wrap a labeled dataset as a publish stream, one message per example."""
    return MessageStream(
        [
            PublishMessage(
                video_id=ex.item.id, payload=ex.item.metadata, event_time=float(i)
            )
            for i, ex in enumerate(examples)
        ]
    )


def source_poll(stream: MessageStream, batch_size: int) -> list[PublishMessage]:
    """Poll one batch, deduplicated by video id (last write wins).

    The consumed offset advances by the raw messages read, before dedup, so
    duplicates are never re-polled. End of stream yields an empty batch;
    a closed stream raises StreamClosedError.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    raw = stream.take(batch_size)
    deduped: dict[str, PublishMessage] = {}
    for msg in raw:
        deduped[msg.video_id] = msg  # later write replaces, position kept
    return list(deduped.values())


# --------------------------------------------------------------------------
# Index
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexRecord:
    """One index entry: the video id and its scored/filtered value map."""

    key: str
    value: Mapping[str, Any]

    def __post_init__(self):
        if not self.key:
            raise ValueError("IndexRecord.key must be non-empty")
        object.__setattr__(self, "value", dict(self.value))


class IndexService:
    """In-memory key-value index with an append-only JSONL persistence log.

    Every upsert/delete appends one `{op, key, value?}` line; reopening with
    the same log path replays the lines to rebuild the map, so the index
    survives process restarts. Mutations are serialized by an internal lock.
    """

    def __init__(self, log_path: str | None = None):
        self._map: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._log_path = log_path
        self._fh = None
        self._closed = False
        if log_path is not None:
            if os.path.exists(log_path):
                self._replay(log_path)
            self._fh = open(log_path, "a", encoding="utf-8")

    def _replay(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                    op = entry["op"]
                    if op == "upsert":
                        self._map[entry["key"]] = entry["value"]
                    elif op == "delete":
                        self._map.pop(entry["key"], None)
                    else:
                        raise ValueError(f"unknown op {op!r}")
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetError(path, lineno, str(exc)) from exc

    def _log(self, entry: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(entry) + "\n")
            self._fh.flush()

    def _check_open(self) -> None:
        if self._closed:
            raise IndexUnavailableError("index is closed")

    def upsert(self, key: str, value: Mapping[str, Any]) -> None:
        with self._lock:
            self._check_open()
            self._map[key] = dict(value)
            self._log({"op": "upsert", "key": key, "value": dict(value)})

    def delete(self, key: str) -> None:
        """Remove the key if present; absent keys are a silent no-op."""
        with self._lock:
            self._check_open()
            if key in self._map:
                del self._map[key]
                self._log({"op": "delete", "key": key})

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._map.get(key)

    def keys(self) -> set[str]:
        with self._lock:
            return set(self._map)

    def snapshot(self) -> dict[str, dict]:
        with self._lock:
            return {k: dict(v) for k, v in self._map.items()}

    def __len__(self) -> int:
        with self._lock:
            return len(self._map)

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._map

    def close(self) -> None:
        with self._lock:
            self._closed = True
            if self._fh is not None:
                self._fh.close()
                self._fh = None


# --------------------------------------------------------------------------
# Retriever
# --------------------------------------------------------------------------

FeatureClient = Callable[[str], Mapping[str, Any]]
"""Resolves a video id to a mapping with optional keys:

    "metadata": numeric map merged over the message payload.
    "bundle": a FeatureBundle for in-process live scoring.

Any exception it raises is wrapped in FeatureFetchFailedError.
"""


def _feature_digest(fetched: Mapping[str, Any]) -> str:
    bundle = fetched.get("bundle")
    canonical = {
        "metadata": dict(fetched.get("metadata", {})),
        "bundle": bundle.to_dict() if bundle is not None else None,
    }
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def retrieve(msg: PublishMessage, scorer, feature_client: FeatureClient) -> IndexRecord:
    """Fetch features, run the cascade, and build the index record.

    ``scorer`` is anything with classify(item) -> CascadeResult (the live
    cascade or a recorded-score replayer). The record value carries the
    stage used, the gate score, the final distribution, the merged
    metadata, and a digest of the fetched features.
    """
    try:
        fetched = feature_client(msg.video_id)
    except FeatureFetchFailedError:
        raise
    except Exception as exc:
        raise FeatureFetchFailedError(msg.video_id, exc) from exc

    metadata = {**msg.payload, **dict(fetched.get("metadata", {}))}
    item = VideoItem(id=msg.video_id, metadata=metadata, features=fetched.get("bundle"))
    result = scorer.classify(item)
    value = {
        "stage_used": result.stage_used.value,
        "gate_score": result.gate.score,
        "final_probs": list(result.final),
        "metadata": metadata,
        "feature_digest": _feature_digest(fetched),
    }
    return IndexRecord(key=msg.video_id, value=value)


# --------------------------------------------------------------------------
# Filter
# --------------------------------------------------------------------------


class Disposition(str, Enum):
    REMAINED = "remained"
    REMOVED = "removed"
    IGNORED = "ignored"


@dataclass(frozen=True)
class FilterOutcome:
    disposition: Disposition
    reason: str


_OPS = {
    ">=": operator.ge,
    ">": operator.gt,
    "<=": operator.le,
    "<": operator.lt,
    "==": operator.eq,
    "!=": operator.ne,
}

_MISSING = object()


def _resolve_field(value: Mapping[str, Any], path: str):
    """Walk a dotted path through nested maps and sequences.

    Numeric segments index into sequences ("final_probs.1"); anything
    unresolvable yields a missing marker, which no rule matches.
    """
    node: Any = value
    for segment in path.split("."):
        if isinstance(node, Mapping):
            if segment not in node:
                return _MISSING
            node = node[segment]
        elif isinstance(node, (list, tuple)) and segment.lstrip("-").isdigit():
            i = int(segment)
            if not -len(node) <= i < len(node):
                return _MISSING
            node = node[i]
        else:
            return _MISSING
    return node


@dataclass(frozen=True)
class FilterRule:
    """One condition: compare a dotted field of the record value against a
    constant; on match, assign the disposition. Missing fields never match."""

    name: str
    field: str
    op: str
    value: float
    disposition: Disposition

    def __post_init__(self):
        if not self.name:
            raise ValueError("rule name must be non-empty")
        if self.op not in _OPS:
            raise ValueError(f"unknown comparison op {self.op!r}")
        object.__setattr__(self, "disposition", Disposition(self.disposition))

    def matches(self, record_value: Mapping[str, Any]) -> bool:
        actual = _resolve_field(record_value, self.field)
        if actual is _MISSING:
            return False
        try:
            return bool(_OPS[self.op](actual, self.value))
        except TypeError:
            return False

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "field": self.field,
            "op": self.op,
            "value": self.value,
            "disposition": self.disposition.value,
        }


@dataclass(frozen=True)
class RuleSet:
    """Ordered rules with a mandatory trailing default disposition."""

    rules: tuple[FilterRule, ...]
    default: Disposition

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "default", Disposition(self.default))

    def to_json_dict(self) -> dict:
        return {
            "rules": [r.to_json_dict() for r in self.rules],
            "default": self.default.value,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "RuleSet":
        if "default" not in data:
            raise ValueError("rule set requires a default disposition")
        rules = tuple(
            FilterRule(
                name=r["name"],
                field=r["field"],
                op=r["op"],
                value=r["value"],
                disposition=Disposition(r["disposition"]),
            )
            for r in data.get("rules", [])
        )
        return cls(rules=rules, default=Disposition(data["default"]))


def filter_stage(record: IndexRecord, rules: RuleSet) -> FilterOutcome:
    """First matching rule wins; the default guarantees an outcome."""
    for rule in rules.rules:
        if rule.matches(record.value):
            return FilterOutcome(disposition=rule.disposition, reason=rule.name)
    return FilterOutcome(disposition=rules.default, reason="default")


# --------------------------------------------------------------------------
# Sink
# --------------------------------------------------------------------------


def sink_apply(
    outcome: FilterOutcome,
    record: IndexRecord,
    index: IndexService,
    audit: list | None = None,
    *,
    retries: int = 3,
    backoff_s: float = 0.01,
) -> None:
    """Apply the disposition to the index and append one audit line.

    remained upserts, removed deletes, ignored leaves the index untouched.
    IndexUnavailableError is retried with doubling backoff up to ``retries``
    times, then re-raised (callers dead-letter). The audit line is written
    only once the mutation succeeded.
    """
    for attempt in range(retries + 1):
        try:
            if outcome.disposition is Disposition.REMAINED:
                index.upsert(record.key, record.value)
            elif outcome.disposition is Disposition.REMOVED:
                index.delete(record.key)
            # ignored: no index mutation
            break
        except IndexUnavailableError:
            if attempt == retries:
                raise
            time.sleep(backoff_s * (2**attempt))
    if audit is not None:
        audit.append(
            {
                "key": record.key,
                "disposition": outcome.disposition.value,
                "reason": outcome.reason,
            }
        )


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeadLetter:
    """A per-item failure parked for inspection instead of halting the run."""

    video_id: str
    stage: str
    reason: str


@dataclass
class PipelineConfig:
    """Everything run_pipeline needs besides the stream itself."""

    policy: GatePolicy
    rules: RuleSet
    scorer: Any
    feature_client: FeatureClient
    index: IndexService
    batch_size: int = 64
    sink_retries: int = 3
    sink_backoff_s: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sink_retries < 0:
            raise ValueError("sink_retries must be >= 0")


@dataclass(frozen=True)
class PipelineReport:
    """Counters for one run; dispositions plus dead letters partition processed."""

    processed: int
    remained: int
    removed: int
    ignored: int
    dead_lettered: int
    audit: tuple = ()
    dead_letters: tuple[DeadLetter, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "processed": self.processed,
            "remained": self.remained,
            "removed": self.removed,
            "ignored": self.ignored,
            "dead_lettered": self.dead_lettered,
        }


_SENTINEL = None


def run_pipeline(
    stream: MessageStream,
    config: PipelineConfig,
    max_batches: int | None = None,
) -> PipelineReport:
    """Drain the stream through all four stages in mini-batches.

    Stages run as threads connected by size-1 queues, so at most one batch
    is in flight per stage; batch order is preserved end to end, making the
    observable result identical to a sequential run. ``max_batches`` stops
    at a batch boundary; the stream keeps its offset, so a later call
    resumes exactly where this one stopped.
    """
    q_polled: queue.Queue = queue.Queue(maxsize=1)
    q_retrieved: queue.Queue = queue.Queue(maxsize=1)
    q_filtered: queue.Queue = queue.Queue(maxsize=1)
    failures: list[BaseException] = []

    counters = {"processed": 0, "remained": 0, "removed": 0, "ignored": 0}
    audit: list[dict] = []
    dead_letters: list[DeadLetter] = []

    def guard(body: Callable[[], None], downstream: queue.Queue | None):
        # On unexpected failure, still forward the sentinel so the pipeline
        # unwinds instead of deadlocking on a full queue.
        try:
            body()
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            failures.append(exc)
            if downstream is not None:
                downstream.put(_SENTINEL)

    def source_body():
        polled = 0
        while max_batches is None or polled < max_batches:
            batch = source_poll(stream, config.batch_size)
            if not batch:
                break
            q_polled.put(batch)
            polled += 1
        q_polled.put(_SENTINEL)

    def retriever_body():
        while True:
            batch = q_polled.get()
            if batch is _SENTINEL:
                q_retrieved.put(_SENTINEL)
                return
            records: list[IndexRecord] = []
            dead: list[DeadLetter] = []
            for msg in batch:
                try:
                    records.append(retrieve(msg, config.scorer, config.feature_client))
                except TriageError as exc:
                    dead.append(DeadLetter(msg.video_id, "retrieve", str(exc)))
            q_retrieved.put((records, dead, len(batch)))

    def filter_body():
        while True:
            item = q_retrieved.get()
            if item is _SENTINEL:
                q_filtered.put(_SENTINEL)
                return
            records, dead, n = item
            pairs = [(rec, filter_stage(rec, config.rules)) for rec in records]
            q_filtered.put((pairs, dead, n))

    def sink_body():
        while True:
            item = q_filtered.get()
            if item is _SENTINEL:
                return
            pairs, dead, n = item
            counters["processed"] += n
            dead_letters.extend(dead)
            for record, outcome in pairs:
                try:
                    sink_apply(
                        outcome,
                        record,
                        config.index,
                        audit,
                        retries=config.sink_retries,
                        backoff_s=config.sink_backoff_s,
                    )
                except IndexUnavailableError as exc:
                    dead_letters.append(DeadLetter(record.key, "sink", str(exc)))
                else:
                    counters[outcome.disposition.value] += 1

    threads = [
        threading.Thread(target=guard, args=(source_body, q_polled), name="vmp-source"),
        threading.Thread(
            target=guard, args=(retriever_body, q_retrieved), name="vmp-retriever"
        ),
        threading.Thread(target=guard, args=(filter_body, q_filtered), name="vmp-filter"),
        threading.Thread(target=guard, args=(sink_body, None), name="vmp-sink"),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]

    return PipelineReport(
        processed=counters["processed"],
        remained=counters["remained"],
        removed=counters["removed"],
        ignored=counters["ignored"],
        dead_lettered=len(dead_letters),
        audit=tuple(audit),
        dead_letters=tuple(dead_letters),
    )


# --------------------------------------------------------------------------
# Config file loading: {batch_size, gate_policy, filter_rules, clients,
# index_log?}. The clients block currently supports recorded-score replay:
# {"dataset": "<jsonl path>"}.
# --------------------------------------------------------------------------


def load_config(data: Mapping[str, Any], *, base_dir: str = ".") -> PipelineConfig:
    """Build a runnable config from the JSON schema shared with the CLI."""
    from .cascade import ReplayScorer
    from .core import read_dataset

    try:
        policy = GatePolicy.from_json_dict(data["gate_policy"])
        rules = RuleSet.from_json_dict(data["filter_rules"])
        clients = data["clients"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"invalid pipeline config: {exc}") from exc

    if "dataset" not in clients:
        raise ValueError("clients block must name a 'dataset' for replay scoring")
    dataset_path = os.path.join(base_dir, clients["dataset"])
    examples = read_dataset(dataset_path)
    by_id = {ex.item.id: ex for ex in examples}

    def feature_client(video_id: str) -> Mapping[str, Any]:
        if video_id not in by_id:
            raise FeatureFetchFailedError(video_id)
        return {"metadata": by_id[video_id].item.metadata}

    index_log = data.get("index_log")
    index = IndexService(
        None if index_log is None else os.path.join(base_dir, index_log)
    )
    return PipelineConfig(
        policy=policy,
        rules=rules,
        scorer=ReplayScorer(examples, policy),
        feature_client=feature_client,
        index=index,
        batch_size=int(data.get("batch_size", 64)),
    )
