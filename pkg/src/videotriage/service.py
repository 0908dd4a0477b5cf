"""HTTP scoring gateway: the cascade behind three JSON endpoints.

POST /score        classify one item (recorded stage-1 probs or raw features)
PUT  /config/gate  atomically swap the gate policy; audited
GET  /stats        traffic counters, forward share, per-stage cost totals

Requests are handled concurrently by a threading HTTP server. Counters and
the policy live behind one lock: each request snapshots the policy once, so
a concurrent swap is linearizable (every response reflects entirely the old
or entirely the new policy, never a mixture). Stats count only successful
(2xx) scoring responses.

The stage-2 client is pluggable: an in-process fusion model, a recorded-
score lookup, a fixed stub, or a remote HTTP service speaking
{video_id, metadata, features?} -> {probs}.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

from .cascade import (
    Classifier,
    LookupClassifier,
    Stage,
    StageFailureError,
    StaticClassifier,
    classify,
)
from .core import ModelOutput, ProbVectorError, VideoItem, validate_prob_vector
from .fusion import FeatureBundle, FusionParams, FusionScorer
from .gate import GatePolicy

__all__ = [
    "RemoteClassifier",
    "GatewayConfig",
    "ScoringGateway",
    "build_client",
    "load_gateway_config",
    "create_server",
]


class RemoteClassifier:
    """Stage client for a separately deployed scoring service.

    POSTs {video_id, metadata, features?} and expects {"probs": [...]}.
    Network and protocol errors propagate; the cascade turns stage-2
    failures into fallbacks.
    """

    def __init__(self, url: str, cost_units: float = 10.0, timeout_s: float = 5.0,
                 model_id: str = "remote"):
        self.url = url
        self.cost_units = cost_units
        self.timeout_s = timeout_s
        self.model_id = model_id

    def score(self, item: VideoItem) -> ModelOutput:
        payload: dict[str, Any] = {"video_id": item.id, "metadata": dict(item.metadata)}
        if item.features is not None:
            payload["features"] = item.features.to_dict()
        request = urllib.request.Request(
            self.url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
            body = json.loads(response.read().decode("utf-8"))
        probs = validate_prob_vector(body["probs"])
        return ModelOutput(probs=probs, model_id=self.model_id, cost_units=self.cost_units)


@dataclass
class GatewayConfig:
    """Server wiring: initial policy, stage clients, replay stage-1 cost."""

    policy: GatePolicy
    stage2: Classifier
    stage1: Classifier | None = None
    stage1_cost: float = 1.0


def build_client(spec: Mapping[str, Any], base_dir: str = ".") -> Classifier:
    """Construct a stage client from its config block (keyed by "kind")."""
    kind = spec.get("kind")
    if kind == "static":
        return StaticClassifier(
            spec["probs"],
            cost_units=float(spec.get("cost_units", 1.0)),
            model_id=spec.get("model_id", "static"),
        )
    if kind == "lookup":
        from .core import read_dataset

        examples = read_dataset(os.path.join(base_dir, spec["dataset"]))
        stage = Stage(spec.get("stage", "stage2"))
        cost = spec.get("cost_units")
        return LookupClassifier.from_examples(
            examples, stage, cost_units=None if cost is None else float(cost)
        )
    if kind == "fusion":
        params = FusionParams.load(os.path.join(base_dir, spec["params"]))
        return FusionScorer(params, cost_units=float(spec.get("cost_units", 10.0)))
    if kind == "remote":
        return RemoteClassifier(
            spec["url"],
            cost_units=float(spec.get("cost_units", 10.0)),
            timeout_s=float(spec.get("timeout_s", 5.0)),
        )
    raise ValueError(f"unknown client kind {kind!r}")


def load_gateway_config(data: Mapping[str, Any], base_dir: str = ".") -> GatewayConfig:
    """Build the server wiring from the shared JSON schema.

    Requires `gate_policy` and `clients.stage2`; `clients.stage1` enables
    live (feature-bearing) requests.
    """
    try:
        policy = GatePolicy.from_json_dict(data["gate_policy"])
        clients = data["clients"]
        stage2 = build_client(clients["stage2"], base_dir)
        stage1 = build_client(clients["stage1"], base_dir) if "stage1" in clients else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"invalid gateway config: {exc}") from exc
    return GatewayConfig(
        policy=policy,
        stage2=stage2,
        stage1=stage1,
        stage1_cost=float(data.get("stage1_cost", 1.0)),
    )


class _BadRequest(Exception):
    """Maps to a 4xx scoring response."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class ScoringGateway(ThreadingHTTPServer):
    """Threaded HTTP server with the cascade state attached.

    Use ``start()``/``stop()`` for background serving; ``port`` reports the
    bound port (bind to port 0 for an ephemeral one).
    """

    daemon_threads = True
    # enough listen backlog that bursts of concurrent clients are not reset
    request_queue_size = 128

    def __init__(self, config: GatewayConfig, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _GatewayHandler)
        self.config = config
        self.lock = threading.Lock()
        self.policy = config.policy
        self.total = 0
        self.forwarded = 0
        self.cost_stage1 = 0.0
        self.cost_stage2 = 0.0
        self.policy_audit: list[dict] = []
        self.request_log: list[dict] = []
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "ScoringGateway":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    # -- state transitions, all under the lock --------------------------------

    def snapshot_policy(self) -> GatePolicy:
        with self.lock:
            return self.policy

    def swap_policy(self, new_policy: GatePolicy) -> GatePolicy:
        with self.lock:
            old = self.policy
            self.policy = new_policy
            self.policy_audit.append(
                {
                    "time": time.time(),
                    "old": old.to_json_dict(),
                    "new": new_policy.to_json_dict(),
                }
            )
            return old

    def record_success(self, entry: dict, stage1_cost: float, total_cost: float) -> None:
        with self.lock:
            self.total += 1
            if entry["stage_used"] == Stage.STAGE2.value:
                self.forwarded += 1
                self.cost_stage1 += stage1_cost
                self.cost_stage2 += total_cost - stage1_cost
            else:
                self.cost_stage1 += total_cost
            self.request_log.append(entry)

    def stats_snapshot(self) -> dict:
        with self.lock:
            ratio = 100.0 * self.forwarded / self.total if self.total else 0.0
            return {
                "total": self.total,
                "forwarded": self.forwarded,
                "qps_ratio_pct": ratio,
                "cost_units": {"stage1": self.cost_stage1, "stage2": self.cost_stage2},
            }

    def request_log_snapshot(self) -> list[dict]:
        with self.lock:
            return [dict(e) for e in self.request_log]


class _GatewayHandler(BaseHTTPRequestHandler):
    server: ScoringGateway

    # keep test output clean; the request log is the observable record
    def log_message(self, format: str, *args) -> None:
        pass

    def _send(self, status: int, payload: Mapping[str, Any]) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        try:
            parsed = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise _BadRequest(400, f"malformed JSON body: {exc}") from exc
        if not isinstance(parsed, dict):
            raise _BadRequest(400, "request body must be a JSON object")
        return parsed

    def do_POST(self) -> None:
        if self.path != "/score":
            self._send(404, {"error": f"no such endpoint {self.path!r}"})
            return
        try:
            request = self._read_json()
            status, payload = self._score(request)
        except _BadRequest as exc:
            self._send(exc.status, {"error": str(exc)})
            return
        self._send(status, payload)

    def do_PUT(self) -> None:
        if self.path != "/config/gate":
            self._send(404, {"error": f"no such endpoint {self.path!r}"})
            return
        try:
            request = self._read_json()
        except _BadRequest as exc:
            self._send(exc.status, {"error": str(exc)})
            return
        try:
            new_policy = GatePolicy.from_json_dict(request)
        except (ValueError, KeyError, TypeError) as exc:
            # old policy stays in force
            self._send(400, {"error": f"invalid gate policy: {exc}"})
            return
        self.server.swap_policy(new_policy)
        self._send(200, {"ok": True, "policy": new_policy.to_json_dict()})

    def do_GET(self) -> None:
        if self.path != "/stats":
            self._send(404, {"error": f"no such endpoint {self.path!r}"})
            return
        self._send(200, self.server.stats_snapshot())

    # -- /score ---------------------------------------------------------------

    def _score(self, request: dict) -> tuple[int, dict]:
        video_id = request.get("video_id")
        if not isinstance(video_id, str) or not video_id:
            raise _BadRequest(400, "video_id must be a non-empty string")
        metadata = request.get("metadata", {})
        if not isinstance(metadata, dict):
            raise _BadRequest(400, "metadata must be an object")

        has_probs = "stage1_probs" in request
        has_features = "features" in request
        if has_probs == has_features:
            raise _BadRequest(
                400, "exactly one of stage1_probs (replay) or features (live) is required"
            )

        config = self.server.config
        if has_probs:
            raw = request["stage1_probs"]
            if not isinstance(raw, (list, tuple)):
                raise _BadRequest(400, "stage1_probs must be an array")
            try:
                probs = validate_prob_vector(raw)
            except ProbVectorError as exc:
                raise _BadRequest(422, f"invalid probability vector: {exc}") from exc
            stage1 = StaticClassifier(
                tuple(probs), cost_units=config.stage1_cost, model_id="replay"
            )
            features = None
        else:
            if config.stage1 is None:
                raise _BadRequest(400, "server has no stage-1 model; send stage1_probs")
            try:
                features = FeatureBundle.from_dict(request["features"])
            except (ValueError, KeyError, TypeError) as exc:
                raise _BadRequest(400, f"invalid features: {exc}") from exc
            stage1 = config.stage1

        try:
            item = VideoItem(id=video_id, metadata=metadata, features=features)
        except (ValueError, TypeError) as exc:
            raise _BadRequest(400, f"invalid metadata: {exc}") from exc

        policy = self.server.snapshot_policy()
        try:
            result = classify(item, stage1, policy, config.stage2)
        except StageFailureError as exc:
            return 502, {"error": str(exc), "fallback": False}
        except ProbVectorError as exc:
            return 422, {"error": f"invalid probability vector: {exc}"}

        payload = {
            "final_probs": list(result.final),
            "stage_used": result.stage_used.value,
            "gate_score": result.gate.score,
            "cost_units": result.cost_units,
            "fallback": result.fallback,
            "policy_kind": result.gate.policy_kind,
        }
        if result.fallback:
            # forwarded but stage 2 failed: degraded answer, not a success
            payload["error"] = "stage-2 client failed; stage-1 result returned"
            return 502, payload

        stage1_cost = getattr(stage1, "cost_units", config.stage1_cost)
        self.server.record_success(
            {
                "video_id": video_id,
                "stage_used": result.stage_used.value,
                "gate_score": result.gate.score,
                "forwarded": result.stage_used is Stage.STAGE2,
                "policy_kind": result.gate.policy_kind,
            },
            stage1_cost=stage1_cost,
            total_cost=result.cost_units,
        )
        return 200, payload


def create_server(
    config: GatewayConfig, host: str = "127.0.0.1", port: int = 0
) -> ScoringGateway:
    """Bind (but do not start) a gateway; port 0 picks an ephemeral port."""
    return ScoringGateway(config, host=host, port=port)
