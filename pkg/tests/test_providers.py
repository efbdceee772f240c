import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaprouter.costmodel import TokenCounts
from gaprouter.errors import InvalidInput, ScorerUnavailable
from gaprouter.providers import (
    RecordError, ScorerEndpoint, fetch_scores, load_records, perturb_ties, remote_guardian,
    save_records,
)
from gaprouter.route import RoutingPolicy, decide

from conftest import inst

ENDPOINT = ScorerEndpoint("http://scorer.test/score", timeout_ms=500, retries=2)
ACTIONS = ["A", "B", "C", "D"]


def client_replying(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_fetch_scores_normalizes_reply():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"scores": [0.1, 0.8, 0.05, 0.05]})

    out = fetch_scores(ENDPOINT, "What is 2+2?", ACTIONS, client_replying(handler))
    assert out.values == (0.1, 0.8, 0.05, 0.05)
    assert seen == [{"context": "What is 2+2?", "actions": ACTIONS}]


@pytest.mark.parametrize("body", [
    b"not json",
    b'{"scores": [0.1, 0.8, 0.1]}',
    b'{"score": [0.1, 0.8, 0.05, 0.05]}',
    b'{"scores": [0.1, -0.8, 0.05, 0.05]}',
    b'{"scores": ["a", "b", "c", "d"]}',
    b'{"scores": [1, 2, 3, NaN]}',
])
def test_content_failures_degrade_to_uniform(body):
    out = fetch_scores(ENDPOINT, "q", ACTIONS, client_replying(lambda r: httpx.Response(200, content=body)))
    assert out.values == (0.25, 0.25, 0.25, 0.25)


def test_client_errors_degrade_to_uniform():
    out = fetch_scores(ENDPOINT, "q", ACTIONS, client_replying(lambda r: httpx.Response(422)))
    assert len(out) == 4 and set(out.values) == {0.25}


def test_transport_failures_retry_then_raise():
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(ScorerUnavailable):
        fetch_scores(ENDPOINT, "q", ACTIONS, client_replying(handler))
    assert len(attempts) == 3


def test_server_error_then_success():
    replies = iter([httpx.Response(503), httpx.Response(200, json={"scores": [1, 1, 1, 1]})])
    out = fetch_scores(ENDPOINT, "q", ACTIONS, client_replying(lambda r: next(replies)))
    assert out.values == (0.25,) * 4


def test_endpoint_validation():
    with pytest.raises(InvalidInput):
        ScorerEndpoint("http://x", timeout_ms=0)
    with pytest.raises(InvalidInput):
        ScorerEndpoint("http://x", retries=-1)


class _Scorer(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        k = len(body["actions"])
        scores = [float(i + 1) for i in range(k)]
        data = json.dumps({"scores": scores}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_live_scorer_as_lazy_guardian():
    server = HTTPServer(("127.0.0.1", 0), _Scorer)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        endpoint = ScorerEndpoint(f"http://127.0.0.1:{server.server_port}/", timeout_ms=2000)
        out = fetch_scores(endpoint, "ctx", ["x", "y", "z"])
        assert out.values == pytest.approx((1 / 6, 2 / 6, 3 / 6))
        d = decide(inst([0.5, 0.45, 0.05]), RoutingPolicy(0.1), remote_guardian(endpoint))
        assert d.actor == "guardian" and d.chosen_index == 1
    finally:
        server.shutdown()


def test_perturb_ties_examples():
    assert perturb_ties([0.37, 0.54], np.random.default_rng(0)).values == (0.37, 0.54)
    assert perturb_ties([0.5, 0.5], np.random.default_rng(2)).values == (0.5 + 0.01, 0.5)
    out = perturb_ties([0.5, 0.5, 0.5], np.random.default_rng(0)).values
    assert len(set(out)) == 3
    assert all(abs(v - 0.5) <= 0.01 + 1e-12 for v in out)


@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5]), min_size=1, max_size=7), st.integers(0, 2**32 - 1))
def test_perturb_ties_properties(vals, seed):
    out = perturb_ties(vals, np.random.default_rng(seed)).values
    assert len(set(out)) == len(out)
    assert out == perturb_ties(vals, np.random.default_rng(seed)).values
    for v, o in zip(vals, out):
        if vals.count(v) == 1:
            assert o == v
        assert abs(o - v) <= 0.01 * len(vals) + 1e-9


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def test_load_records_in_order(tmp_path):
    lines = [json.dumps({"id": f"q{i}", "actions": ["a", "b"], "primary_scores": [0.6, 0.4]}) for i in range(3)]
    got = load_records(_write(tmp_path / "r.jsonl", lines))
    assert [x.id for x in got] == ["q0", "q1", "q2"]


def test_schema_error_reports_line_and_field(tmp_path):
    good = json.dumps({"id": "ok", "actions": ["a", "b"], "primary_scores": [0.6, 0.4]})
    bad = json.dumps({"id": "bad", "actions": ["a", "b", "c", "d"], "primary_scores": [0.1, 0.2, 0.7]})
    with pytest.raises(RecordError) as err:
        load_records(_write(tmp_path / "r.jsonl", [good, bad]))
    assert err.value.lineno == 2 and err.value.field == "primary_scores"


@pytest.mark.parametrize("record,field", [
    ({"actions": ["a"], "primary_scores": [1]}, "id"),
    ({"id": "x", "actions": ["a"], "primary_scores": [1], "labels": {"severities": [5]}}, "labels.severities"),
    ({"id": "x", "actions": ["a"], "primary_scores": [1], "tokens": {"primary_in": -3}}, "tokens.primary_in"),
    ({"id": "x", "actions": ["a", "b"], "primary_scores": [1, 0], "guardian_scores": [1]}, "guardian_scores"),
    ({"id": "x", "actions": ["a"], "primary_scores": [1], "labels": {"correct_index": 3}}, "labels.correct_index"),
])
def test_schema_violations_name_field(tmp_path, record, field):
    with pytest.raises(RecordError) as err:
        load_records(_write(tmp_path / "r.jsonl", [json.dumps(record)]))
    assert err.value.field == field


def test_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_records(path) == []
    assert "no instances" in caplog.text


def test_missing_file():
    with pytest.raises(InvalidInput):
        load_records("/nonexistent/records.jsonl")


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    items = []
    for i in range(20):
        k = int(rng.integers(1, 5))
        items.append(inst(
            rng.random(k).tolist(), rng.random(k).tolist() if i % 3 else None, id=f"i{i}",
            correct=int(rng.integers(k)), severities=rng.integers(0, 4, k).tolist() if i % 2 else None,
            helpful=0, tokens=TokenCounts(10, 2, 12, 3, 10) if i % 4 else None,
            meta={"subject": f"s{i % 3}"},
        ))
    path = tmp_path / "rt.jsonl"
    save_records(items, path)
    assert load_records(path) == items
