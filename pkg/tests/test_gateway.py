import json

import httpx
import numpy as np
import pytest

from mabdqa.embedding import ContractError, PageRecord
from mabdqa.gateway import (
    GatewayConfig,
    GatewayConfigError,
    GatewayError,
    MockEmbedder,
    MockGateway,
    MockRule,
    OpenAIGateway,
    PageContent,
    ReplyParseError,
    grade_answer,
    judge_page,
    load_mock_script,
    parse_grade,
    parse_rating,
)
from mabdqa.prompts import render


def cfg(**kw):
    return GatewayConfig(api_base="http://model.test/v1", api_key="k", **kw)


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def scripted(responses):
    seen = []

    def handler(request):
        seen.append(request)
        r = responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r

    return httpx.MockTransport(handler), seen


# ---------------------------------------------------------------- HTTP client


def test_missing_key_fails_before_network(monkeypatch):
    monkeypatch.delenv("MABDQA_API_KEY", raising=False)
    with pytest.raises(GatewayConfigError):
        OpenAIGateway(GatewayConfig.from_env())


def test_retry_then_success():
    transport, seen = scripted([httpx.Response(503, text="busy"), httpx.ConnectError("down"), chat_reply("Thinking... 4")])
    sleeps = []
    gw = OpenAIGateway(cfg(), transport=transport, sleep=sleeps.append)
    out = gw.chat("judge", {"priori": "very", "query": "q"})
    assert out == "Thinking... 4"
    assert gw.telemetry == {"requests": 3, "retries": 2, "failures": 0}
    assert sleeps == [1.0, 2.0]
    body = json.loads(seen[-1].content)
    assert body["temperature"] == 0.0
    assert body["messages"][-1]["content"] == render("judge", {"priori": "very", "query": "q"})
    assert seen[-1].headers["authorization"] == "Bearer k"


def test_retries_exhausted():
    transport, _ = scripted([httpx.Response(500)] * 3)
    gw = OpenAIGateway(cfg(), transport=transport, sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.chat("decompose", {}, user_text="q")
    assert gw.telemetry["failures"] == 1


def test_auth_error_is_not_retried():
    transport, seen = scripted([httpx.Response(401)])
    gw = OpenAIGateway(cfg(), transport=transport, sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.chat("decompose", {}, user_text="q")
    assert len(seen) == 1


def test_system_and_user_messages_with_pages():
    transport, seen = scripted([chat_reply("a, b"), chat_reply("x")])
    gw = OpenAIGateway(cfg(), transport=transport)
    gw.chat("decompose", {}, user_text="the question")
    msgs = json.loads(seen[0].content)["messages"]
    assert [m["role"] for m in msgs] == ["system", "user"]
    assert msgs[1]["content"] == "the question"
    gw.chat("answer", {"num_images": 1, "question": "q"}, pages=[PageContent("p1", text="page text")])
    parts = json.loads(seen[1].content)["messages"][0]["content"]
    assert any("page text" in p.get("text", "") for p in parts)


def test_embed_shapes_and_drift():
    transport, _ = scripted(
        [
            httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 1]}, {"index": 0, "embedding": [[1, 0], [0, 1]]}]}),
            httpx.Response(200, json={"data": [{"index": 0, "embedding": [1, 0]}, {"index": 1, "embedding": [1, 0, 0]}]}),
        ]
    )
    gw = OpenAIGateway(cfg(), transport=transport)
    out = gw.embed(["a", "b"])
    assert [e.shape for e in out] == [(2, 2), (1, 2)]
    with pytest.raises(GatewayError):
        gw.embed(["a", "b"])
    with pytest.raises(ContractError):
        gw.embed([])


# ---------------------------------------------------------------- parsing


def test_parse_rating():
    assert parse_rating("Thinking... 4") == 4
    assert parse_rating("Scores 1 to 5 considered; final: 3") == 3
    with pytest.raises(ReplyParseError):
        parse_rating("no digits here")
    with pytest.raises(ReplyParseError):
        parse_rating("42")


def test_parse_grade():
    assert parse_grade('{"binary_correctness": 0}') == 0
    assert parse_grade('Output: {"binary_correctness": 1} done') == 1
    with pytest.raises(ReplyParseError):
        parse_grade("{oops")


# ---------------------------------------------------------------- mock


def test_mock_embedder_deterministic():
    e = MockEmbedder(16, seed=3)
    a, b = e.embed(["x"])[0], e.embed(["x"])[0]
    assert np.array_equal(a, b)
    out = e.embed(["a b", "c", "d e f"])
    assert len(out) == 3 and {x.shape[1] for x in out} == {16}
    with pytest.raises(ContractError):
        e.embed([])


def test_mock_rules_and_defaults():
    page = PageRecord("d", "p7", 1, np.ones((1, 2), np.float32), text="irrelevant")
    gw = MockGateway([MockRule("judge", "Thinking... 5", page="p7"), MockRule("B.3", '{"binary_correctness": 1}', contains={"answer": "twelve"})])
    assert judge_page(gw, "q", page, "very") == 5
    assert grade_answer(gw, "q", "twelve million", "12") == 1
    assert grade_answer(gw, "q", "12 million", "12 million") == 1
    assert grade_answer(gw, "q", "Not answerable", "Not answerable") == 1
    assert grade_answer(gw, "q", "13", "12 million") == 0


def test_mock_error_rule():
    gw = MockGateway([MockRule("answer", error="boom")])
    with pytest.raises(GatewayError):
        gw.chat("answer", {"num_images": 1, "question": "q"})


def test_mock_is_pure():
    p = PageContent("p1", text="revenue 2023 was 12 million")
    replies = []
    for _ in range(2):
        gw = MockGateway(seed=5)
        replies.append([gw.chat("judge", {"priori": "very", "query": "revenue 2023"}, pages=[p]), gw.chat("decompose", {}, user_text="revenue in 2023 and staff")])
    assert replies[0] == replies[1]


def test_load_mock_script(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps([{"template": "answer", "reply": "x"}]))
    assert load_mock_script(path)[0].reply == "x"
    path.write_text(json.dumps({"template": "answer"}))
    with pytest.raises(GatewayConfigError):
        load_mock_script(path)
