import json
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from videotriage.cascade import StaticClassifier
from videotriage.core import ModelOutput, VideoItem
from videotriage.fusion import FeatureBundle, FusionScorer, train
from videotriage.gate import GatePolicy
from videotriage.service import (
    GatewayConfig,
    RemoteClassifier,
    build_client,
    create_server,
    load_gateway_config,
)

AMBIGUOUS = [0.55, 0.45]  # entropy ~0.993, forwarded at tau 0.6
CONFIDENT = [0.99, 0.01]  # entropy ~0.081, retained at tau 0.6


def http(method, url, body=None, raw=None):
    data = raw if raw is not None else (None if body is None else json.dumps(body).encode())
    request = urllib.request.Request(
        url, data=data, method=method, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request, timeout=10) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read().decode())


def make_server(stage2=None, stage1=None, tau=0.6):
    config = GatewayConfig(
        policy=GatePolicy.entropy(tau),
        stage2=stage2 or StaticClassifier((0.05, 0.95), cost_units=10.0, model_id="s2"),
        stage1=stage1,
    )
    return create_server(config).start()


@pytest.fixture
def server():
    gateway = make_server()
    yield gateway
    gateway.stop()


def base(gateway):
    return f"http://127.0.0.1:{gateway.port}"


# ---------------------------------------------------------------- /score


def test_score_forwarded(server):
    status, body = http(
        "POST", base(server) + "/score", {"video_id": "v1", "stage1_probs": AMBIGUOUS}
    )
    assert status == 200
    assert body["stage_used"] == "stage2"
    assert body["final_probs"] == [0.05, 0.95]
    assert body["cost_units"] == 11.0
    assert body["fallback"] is False
    assert body["policy_kind"] == "entropy"
    assert abs(body["gate_score"] - 0.9927744539878083) < 1e-12


def test_score_retained(server):
    status, body = http(
        "POST", base(server) + "/score", {"video_id": "v1", "stage1_probs": CONFIDENT}
    )
    assert status == 200
    assert body["stage_used"] == "stage1"
    assert body["final_probs"] == CONFIDENT
    assert body["cost_units"] == 1.0


def test_score_bad_requests(server):
    url = base(server) + "/score"
    cases = [
        {"stage1_probs": AMBIGUOUS},  # missing video_id
        {"video_id": "", "stage1_probs": AMBIGUOUS},
        {"video_id": "v", "stage1_probs": AMBIGUOUS, "features": {}},  # both
        {"video_id": "v"},  # neither
        {"video_id": "v", "stage1_probs": "nope"},
        {"video_id": "v", "metadata": [], "stage1_probs": AMBIGUOUS},
        {"video_id": "v", "features": {"frame_feats": [[1.0]]}},  # no stage-1 model
    ]
    for body in cases:
        status, payload = http("POST", url, body)
        assert status == 400, body
        assert "error" in payload
    status, payload = http("POST", url, raw=b"this is not json")
    assert status == 400


def test_score_invalid_probs_is_422(server):
    url = base(server) + "/score"
    for bad in ([0.7, 0.4], [1.0], [-0.1, 1.1]):
        status, payload = http("POST", url, {"video_id": "v", "stage1_probs": bad})
        assert status == 422, bad
        assert "error" in payload


def test_unknown_paths_are_404(server):
    assert http("GET", base(server) + "/nope")[0] == 404
    assert http("POST", base(server) + "/nope", {})[0] == 404
    assert http("PUT", base(server) + "/nope", {})[0] == 404


class ExplodingClassifier:
    cost_units = 10.0
    model_id = "exploding"

    def score(self, item):
        raise RuntimeError("stage-2 backend down")


def test_stage2_failure_falls_back_with_502():
    gateway = make_server(stage2=ExplodingClassifier())
    try:
        url = base(gateway) + "/score"
        status, body = http("POST", url, {"video_id": "v", "stage1_probs": AMBIGUOUS})
        assert status == 502
        assert body["fallback"] is True
        assert body["final_probs"] == AMBIGUOUS  # degraded to the stage-1 answer
        assert body["cost_units"] == 1.0
        assert "error" in body
        # degraded answers are not successes
        assert gateway.stats_snapshot()["total"] == 0
        # retained items never reach stage 2 and still succeed
        status, _ = http("POST", url, {"video_id": "v", "stage1_probs": CONFIDENT})
        assert status == 200
        assert gateway.stats_snapshot()["total"] == 1
    finally:
        gateway.stop()


# ---------------------------------------------------------------- live mode


def live_setup():
    rng = np.random.default_rng(0)
    dataset = []
    for i in range(30):
        label = i % 2
        center = 2.0 if label else -2.0
        dataset.append(
            (
                FeatureBundle(
                    frame_feats=rng.normal(loc=center, scale=0.3, size=(2, 3)),
                    text_feats=np.zeros((0, 4)),
                    audio_frames=np.zeros((0, 1)),
                ),
                label,
            )
        )
    params, _ = train(dataset, epochs=80, learning_rate=0.5, seed=1, d_h=4)
    return FusionScorer(params, cost_units=1.0), dataset


def test_live_scoring_with_features():
    stage1, dataset = live_setup()
    gateway = make_server(stage1=stage1)
    try:
        url = base(gateway) + "/score"
        bundle, _ = dataset[0]
        status, body = http(
            "POST", url, {"video_id": "v", "features": bundle.to_dict()}
        )
        assert status == 200
        assert body["stage_used"] in ("stage1", "stage2")
        status, _ = http("POST", url, {"video_id": "v", "features": {"bogus": 1}})
        assert status == 400
    finally:
        gateway.stop()


# ---------------------------------------------------------------- /config/gate


def test_policy_swap_changes_behavior(server):
    url = base(server)
    status, body = http("POST", url + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS})
    assert body["stage_used"] == "stage2"

    status, body = http("PUT", url + "/config/gate", {"kind": "entropy", "threshold": 1.01})
    assert status == 200
    assert body == {"ok": True, "policy": {"kind": "entropy", "threshold": 1.01}}

    status, body = http("POST", url + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS})
    assert body["stage_used"] == "stage1"  # nothing clears an unreachable bar

    audit = server.policy_audit
    assert len(audit) == 1
    assert audit[0]["old"] == {"kind": "entropy", "threshold": 0.6}
    assert audit[0]["new"] == {"kind": "entropy", "threshold": 1.01}


def test_invalid_policy_rejected_old_retained(server):
    url = base(server)
    status, body = http("PUT", url + "/config/gate", {"kind": "nonsense", "threshold": 0.5})
    assert status == 400
    assert "error" in body
    status, body = http("POST", url + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS})
    assert body["stage_used"] == "stage2"  # original tau 0.6 entropy gate survives
    assert server.policy_audit == []


def test_swap_to_confidence_gate(server):
    url = base(server)
    http("PUT", url + "/config/gate", {"kind": "confidence", "threshold": 0.4})
    status, body = http("POST", url + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS})
    assert body["policy_kind"] == "confidence"
    assert body["stage_used"] == "stage2"  # p1 0.45 >= 0.4
    status, body = http("POST", url + "/score", {"video_id": "v", "stage1_probs": CONFIDENT})
    assert body["stage_used"] == "stage1"  # p1 0.01 < 0.4


# ---------------------------------------------------------------- /stats


def test_stats_fresh(server):
    status, body = http("GET", base(server) + "/stats")
    assert status == 200
    assert body == {
        "total": 0,
        "forwarded": 0,
        "qps_ratio_pct": 0.0,
        "cost_units": {"stage1": 0.0, "stage2": 0.0},
    }


def test_stats_track_successes_exactly(server):
    url = base(server)
    for _ in range(6):
        http("POST", url + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS})
    for _ in range(4):
        http("POST", url + "/score", {"video_id": "v", "stage1_probs": CONFIDENT})
    http("POST", url + "/score", {"video_id": "v", "stage1_probs": [0.7, 0.4]})  # 422

    status, body = http("GET", url + "/stats")
    assert body["total"] == 10
    assert body["forwarded"] == 6
    assert body["qps_ratio_pct"] == 60.0
    # forwarded items pay both stages, retained ones only stage 1
    assert body["cost_units"] == {"stage1": 10.0, "stage2": 60.0}


# ---------------------------------------------------------------- concurrency


def test_concurrent_load_with_mid_flight_swap(server):
    url = base(server)
    swapped = threading.Event()

    def one(i):
        if i == 100:
            http("PUT", url + "/config/gate", {"kind": "confidence", "threshold": 0.7})
            swapped.set()
        status, body = http(
            "POST", url + "/score", {"video_id": f"v{i}", "stage1_probs": AMBIGUOUS}
        )
        assert status == 200
        return body

    with ThreadPoolExecutor(max_workers=16) as pool:
        bodies = list(pool.map(one, range(200)))
    assert swapped.is_set()

    stats = server.stats_snapshot()
    assert stats["total"] == 200
    forwarded = sum(1 for b in bodies if b["stage_used"] == "stage2")
    assert stats["forwarded"] == forwarded
    # each response is self-consistent with the policy that scored it
    for b in bodies:
        if b["policy_kind"] == "entropy":
            assert b["stage_used"] == "stage2"  # entropy 0.993 >= 0.6
        else:
            assert b["stage_used"] == "stage1"  # confidence 0.45 < 0.7
    assert any(b["policy_kind"] == "confidence" for b in bodies)


# ---------------------------------------------------------------- remote client


class _StubHandler(BaseHTTPRequestHandler):
    def log_message(self, format, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.server.fail:
            self.send_response(500)
            self.end_headers()
            return
        self.server.seen.append(body)
        payload = json.dumps({"probs": [0.2, 0.8]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


def stub_remote(fail=False):
    httpd = HTTPServer(("127.0.0.1", 0), _StubHandler)
    httpd.fail = fail
    httpd.seen = []
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    return httpd


def test_remote_classifier_scores():
    httpd = stub_remote()
    try:
        client = RemoteClassifier(f"http://127.0.0.1:{httpd.server_port}", cost_units=7.0)
        output = client.score(VideoItem(id="v1", metadata={"vv": 10.0}))
        assert isinstance(output, ModelOutput)
        assert tuple(output.probs) == (0.2, 0.8)
        assert output.cost_units == 7.0
        assert httpd.seen == [{"video_id": "v1", "metadata": {"vv": 10.0}}]
    finally:
        httpd.shutdown()


def test_remote_stage2_failure_becomes_fallback():
    httpd = stub_remote(fail=True)
    gateway = make_server(
        stage2=RemoteClassifier(f"http://127.0.0.1:{httpd.server_port}", timeout_s=2.0)
    )
    try:
        status, body = http(
            "POST", base(gateway) + "/score", {"video_id": "v", "stage1_probs": AMBIGUOUS}
        )
        assert status == 502
        assert body["fallback"] is True
        assert body["final_probs"] == AMBIGUOUS
    finally:
        gateway.stop()
        httpd.shutdown()


# ---------------------------------------------------------------- config


def test_build_client_kinds(tmp_path):
    static = build_client({"kind": "static", "probs": [0.3, 0.7], "cost_units": 2.0})
    assert tuple(static.score(VideoItem(id="v")).probs) == (0.3, 0.7)
    with pytest.raises(ValueError):
        build_client({"kind": "warp-drive"})


def test_load_gateway_config_minimal():
    config = load_gateway_config(
        {
            "gate_policy": {"kind": "entropy", "threshold": 0.5},
            "clients": {"stage2": {"kind": "static", "probs": [0.1, 0.9]}},
        }
    )
    assert config.stage1 is None
    assert config.stage1_cost == 1.0
    for missing in ({}, {"gate_policy": {"kind": "entropy", "threshold": 0.5}}):
        with pytest.raises(ValueError):
            load_gateway_config(missing)
