import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import pytest

from xnode.explain import (ExplanationRecord, ProviderAuthError, ProviderConfig, ProviderEmptyError,
                           ProviderError, RemoteProvider, build_prompt, explain_nodes,
                           generate_explanation, load_explanations, offline_explanation,
                           parse_prompt, persist_explanations, render_context)

NODE3 = {"degree": 4, "clustering": 0.0, "two_hop_agreement": 0.25, "eigencentrality": 0.0412,
         "betweenness": 0.0031, "avg_edge_weight": 0.92871, "community": 2,
         "top_feature_index": 117, "top_feature_value": 10.0}


def expected_prompt(ctx: str, pred: str, true: str | None) -> str:
    clause = f" True label: {true}" if true else ""
    return ("You are a node in a medical graph.\n"
            f"Your topological context is: {ctx}\n"
            f"Your predicted label: {pred}.{clause}\n"
            f"Explain in natural language why you predicted {pred}. If incorrect, describe what "
            "might have misled you based on your structure, features, and neighbors.")


def test_node3_prompt_tokens():
    prompt = build_prompt(NODE3, "femur-left", "kidney-right")
    for token in ('"degree": 4', '"clustering": 0.00', "0.929", "F[117]=10.00", "femur-left",
                  "kidney-right"):
        assert token in prompt
    assert "<" not in prompt


def test_prompt_matches_scaffold_exactly():
    ctx = render_context(NODE3)
    assert build_prompt(NODE3, "femur-left", "kidney-right") == expected_prompt(ctx, "femur-left",
                                                                                "kidney-right")
    assert build_prompt(NODE3, "femur-left") == expected_prompt(ctx, "femur-left", None)
    assert "True label:" not in build_prompt(NODE3, "femur-left")


def test_render_context_formats():
    ctx = render_context(NODE3)
    assert ctx == ('{"degree": 4, "clustering": 0.000, "two_hop_agreement": 0.250, '
                   '"eigencentrality": 0.041, "betweenness": 0.003, "avg_edge_weight": 0.929, '
                   '"community": 2, "top_feature": "F[117]=10.000"}')
    assert json.loads(ctx)["degree"] == 4


def test_prompt_is_deterministic_and_parseable():
    a = build_prompt(NODE3, "femur-left", "kidney-right")
    assert a == build_prompt(dict(NODE3), "femur-left", "kidney-right")
    kv, pred, true = parse_prompt(a)
    assert (kv["avg_edge_weight"], pred, true) == (0.929, "femur-left", "kidney-right")
    with pytest.raises(ValueError):
        build_prompt(NODE3, "")
    with pytest.raises(ValueError):
        parse_prompt("hello")


def test_offline_templates():
    right = offline_explanation(build_prompt(NODE3, "kidney-right", "kidney-right"))
    assert "degree of 4" in right and "kidney-right" in right
    wrong = offline_explanation(build_prompt(NODE3, "femur-left", "kidney-right"))
    assert "degree of 4" in wrong and "femur-left" in wrong and "kidney-right" in wrong
    assert wrong != right
    unknown = generate_explanation(build_prompt(NODE3, "femur-left"), ProviderConfig())
    assert "femur-left" in unknown and "true label" not in unknown


def test_provider_config_validation():
    with pytest.raises(ValueError):
        ProviderConfig(kind="remote")
    with pytest.raises(ValueError):
        ProviderConfig(kind="cloud")
    assert ProviderConfig().provider_id == "offline-template"


class MockLLM(BaseHTTPRequestHandler):
    replies: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.headers.get("Authorization"), body))
        status, payload = type(self).replies.pop(0) if type(self).replies else (200, {"text": "ok"})
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    MockLLM.replies, MockLLM.seen = [], []
    httpd = HTTPServer(("127.0.0.1", 0), MockLLM)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}/v1/complete"
    httpd.shutdown()
    httpd.server_close()


def remote(url, **kw):
    return ProviderConfig(kind="remote", endpoint=url, model="mock-1", token_env="XNODE_TEST_TOKEN",
                          backoff=0.0, **kw)


def test_remote_provider_records_text_and_model(server, monkeypatch):
    monkeypatch.setenv("XNODE_TEST_TOKEN", "s3cret")
    MockLLM.replies = [(200, {"text": "I am node 0."}), (200, {"text": "I am node 5."})]
    items = [(5, NODE3, "femur-left", "kidney-right"), (0, NODE3, "femur-left", None)]
    records = explain_nodes(items, remote(server))
    assert [r.node for r in records] == [0, 5]
    assert {r.text for r in records} == {"I am node 0.", "I am node 5."}
    assert all(r.model == "mock-1" and r.provider == "remote:mock-1" for r in records)
    auth, body = MockLLM.seen[0]
    assert auth == "Bearer s3cret" and body["model"] == "mock-1" and "prompt" in body


def test_remote_auth_and_empty_errors(server, monkeypatch):
    monkeypatch.setenv("XNODE_TEST_TOKEN", "x")
    MockLLM.replies = [(401, {})]
    with pytest.raises(ProviderAuthError):
        generate_explanation("p", remote(server))
    MockLLM.replies = [(200, {"text": "  "})]
    with pytest.raises(ProviderEmptyError):
        generate_explanation("p", remote(server))
    monkeypatch.delenv("XNODE_TEST_TOKEN")
    with pytest.raises(ProviderAuthError):
        generate_explanation("p", remote(server))


def test_remote_retries_server_errors_then_succeeds(server, monkeypatch):
    monkeypatch.setenv("XNODE_TEST_TOKEN", "x")
    MockLLM.replies = [(503, {}), (429, {}), (200, {"text": "third time"})]
    assert generate_explanation("p", remote(server)) == "third time"
    assert len(MockLLM.seen) == 3
    MockLLM.replies = [(500, {})] * 4
    with pytest.raises(ProviderError, match="gave up"):
        generate_explanation("p", remote(server, max_retries=2))


def test_remote_retries_transport_errors_with_backoff(monkeypatch):
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) < 3:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}]})

    sleeps = []
    monkeypatch.setattr("xnode.explain.time.sleep", sleeps.append)
    cfg = ProviderConfig(kind="remote", endpoint="http://mock/", model="m", adapter="openai", backoff=0.5)
    provider = RemoteProvider(cfg, transport=httpx.MockTransport(handler))
    assert provider.complete("p") == "hi"
    assert sleeps == [0.5, 1.0]
    assert json.loads(calls[0].content)["messages"][0]["content"] == "p"


def test_jsonl_round_trip(tmp_path):
    records = explain_nodes([(i, NODE3, "a", "b") for i in range(3)], ProviderConfig())
    records[1].text = "line one\nline two ✓"
    persist_explanations(records, tmp_path / "e.jsonl")
    assert load_explanations(tmp_path / "e.jsonl") == records
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 3
    persist_explanations([], tmp_path / "empty.jsonl")
    assert (tmp_path / "empty.jsonl").read_text() == ""
    assert load_explanations(tmp_path / "empty.jsonl") == []


def test_jsonl_errors_carry_line_numbers(tmp_path):
    good = explain_nodes([(0, NODE3, "a", None)], ProviderConfig())[0].to_json()
    (tmp_path / "bad.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(ValueError, match="line 2"):
        load_explanations(tmp_path / "bad.jsonl")
    (tmp_path / "missing.jsonl").write_text('{"node": 1}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_explanations(tmp_path / "missing.jsonl")


def test_record_flattens_context():
    rec = ExplanationRecord(3, {"degree": 4}, "a", None, "p", "t", "offline-template")
    obj = json.loads(rec.to_json())
    assert obj["ctx.degree"] == 4 and "context" not in obj
    assert ExplanationRecord.from_json(rec.to_json()) == rec
