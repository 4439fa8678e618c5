"""Provider surface: contracts, retries, yes-probability, record/replay."""

from __future__ import annotations

import json
import math

import httpx
import numpy as np
import pytest

from courseqa.provider import (
    AUTO,
    ChatMessage,
    CompletionResponse,
    NONE,
    OpenAIProvider,
    ProviderError,
    RateLimitError,
    RateLimiter,
    RecordingProvider,
    ReplayMissError,
    ReplayProvider,
    ScriptExhaustedError,
    ScriptedProvider,
    ToolCall,
    ToolChoice,
    ToolContractError,
    ToolParam,
    ToolSchema,
    TransportError,
    REQUIRED,
    chat_complete,
    chat_request_dict,
    embed,
    request_hash,
    text_response,
    tool_call_response,
    user,
    yes_probability,
)

QA_TOOL = ToolSchema(
    name="qa_retrieval",
    description="Search past Q&A.",
    parameters=(ToolParam("query", "string"), ToolParam("top_k", "integer", required=False)),
)


class FlakyProvider(ScriptedProvider):
    def __init__(self, failures, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._failures = list(failures)

    def chat(self, *args, **kwargs):
        if self._failures:
            raise self._failures.pop(0)
        return super().chat(*args, **kwargs)


def test_message_invariants():
    with pytest.raises(ValueError):
        ChatMessage("tool", "result")  # missing tool_call_id
    with pytest.raises(ValueError):
        ChatMessage("oracle", "hi")
    with pytest.raises(ValueError):
        CompletionResponse()  # neither text nor calls


def test_chat_complete_preconditions():
    provider = ScriptedProvider(["hi"])
    with pytest.raises(ValueError):
        chat_complete(provider, [])
    with pytest.raises(ValueError):
        chat_complete(provider, [user("q")], tool_choice=REQUIRED)  # no tools


def test_scripted_tool_call_passthrough():
    call = ToolCall("qa_retrieval", {"query": "q", "top_k": 3})
    provider = ScriptedProvider([tool_call_response(call)])
    response = chat_complete(
        provider, [user("question")], tools=[QA_TOOL], tool_choice=AUTO
    )
    assert response.tool_calls == (call,)
    assert response.text is None


def test_tool_choice_none_text_passthrough():
    provider = ScriptedProvider(["hello"])
    response = chat_complete(provider, [user("q")], tool_choice=NONE)
    assert response.text == "hello"
    assert response.tool_calls == ()


def test_required_contract_violation_after_retries():
    provider = ScriptedProvider(["no call", "still none", "nope"])
    with pytest.raises(ToolContractError):
        chat_complete(
            provider,
            [user("q")],
            tools=[QA_TOOL],
            tool_choice=REQUIRED,
            contract_retries=2,
        )
    assert len(provider.chat_log) == 3  # initial attempt + 2 retries


def test_specific_contract_checks_name():
    wrong = tool_call_response(ToolCall("textbook_retrieval", {"query": "q"}))
    provider = ScriptedProvider([wrong, wrong, wrong])
    with pytest.raises(ToolContractError):
        chat_complete(
            provider,
            [user("q")],
            tools=[QA_TOOL],
            tool_choice=ToolChoice.specific("qa_retrieval"),
        )


def test_transport_retries_with_backoff():
    delays = []
    provider = FlakyProvider(
        [TransportError("boom"), RateLimitError("slow down")], ["recovered"]
    )
    response = chat_complete(
        provider, [user("q")], backoff_base=1.0, sleep=delays.append
    )
    assert response.text == "recovered"
    assert delays == [1.0, 2.0]


def test_transport_failure_exhausts_attempts():
    provider = FlakyProvider([TransportError("a"), TransportError("b"), TransportError("c")])
    with pytest.raises(TransportError):
        chat_complete(provider, [user("q")], sleep=lambda _: None)


def test_script_exhaustion_is_loud():
    provider = ScriptedProvider([])
    with pytest.raises(ScriptExhaustedError):
        provider.chat([user("q")])


def test_embed_shapes_and_determinism():
    provider = ScriptedProvider(embed_dim=4)
    vectors = embed(provider, ["a", "b"])
    assert len(vectors) == 2 and all(v.shape == (4,) for v in vectors)
    again = embed(provider, ["a", "a"])
    assert np.array_equal(again[0], again[1])
    assert np.array_equal(vectors[0], again[0])
    with pytest.raises(ValueError):
        embed(provider, [])


def test_embed_validates_uniform_dimension():
    class Ragged(ScriptedProvider):
        def embed(self, texts):
            return [np.zeros(3), np.zeros(4)][: len(texts)]

    with pytest.raises(ProviderError):
        embed(Ragged(), ["a", "b"])


def test_embed_rejects_non_finite():
    class Bad(ScriptedProvider):
        def embed(self, texts):
            return [np.array([1.0, float("nan")]) for _ in texts]

    with pytest.raises(ProviderError):
        embed(Bad(), ["a"])


def test_yes_probability_exp_inverse():
    provider = ScriptedProvider([text_response("yes", logprobs=[("yes", math.log(0.5))])])
    assert abs(yes_probability(provider, "q", "doc") - 0.5) < 1e-12


def test_yes_probability_sums_case_variants():
    provider = ScriptedProvider(
        [text_response("Yes", logprobs=[("Yes", math.log(0.3)), ("yes", math.log(0.2)), ("no", math.log(0.5))])]
    )
    assert abs(yes_probability(provider, "q", "doc") - 0.5) < 1e-12


def test_yes_probability_floor_when_absent(caplog):
    provider = ScriptedProvider([text_response("no", logprobs=[("no", math.log(0.9))])])
    with caplog.at_level("WARNING"):
        p = yes_probability(provider, "q", "doc")
    assert p == 1e-6
    assert any("yes token absent" in r.message for r in caplog.records)


def test_yes_probability_monotone_in_logprob():
    lo = ScriptedProvider([text_response("yes", logprobs=[("yes", math.log(0.2))])])
    hi = ScriptedProvider([text_response("yes", logprobs=[("yes", math.log(0.8))])])
    assert yes_probability(hi, "q", "d") > yes_probability(lo, "q", "d")


def test_yes_probability_requires_logprobs():
    provider = ScriptedProvider(["yes"])
    with pytest.raises(ProviderError):
        yes_probability(provider, "q", "doc")


def test_request_hash_normalizes_whitespace_and_key_order():
    a = chat_request_dict([user("hello   world\n")], None, NONE, False, 0)
    b = chat_request_dict([user("hello world")], None, NONE, False, 0)
    assert request_hash(a) == request_hash(b)
    assert request_hash({"x": 1, "y": 2}) == request_hash({"y": 2, "x": 1})
    c = chat_request_dict([user("hello world")], None, NONE, False, 1)
    assert request_hash(a) != request_hash(c)  # seed is part of the key


def test_record_then_replay_round_trip(tmp_path):
    fixture = tmp_path / "fixture.jsonl"
    inner = ScriptedProvider(["one", "two"], embed_dim=3)
    recorder = RecordingProvider(inner, fixture)
    r1 = recorder.chat([user("first")])
    r2 = recorder.chat([user("second")])
    e1 = recorder.embed(["alpha"])

    lines = [json.loads(line) for line in fixture.read_text().splitlines()]
    assert len(lines) == 3
    assert all(set(entry) == {"hash", "request", "response"} for entry in lines)

    replay = ReplayProvider(fixture)
    live_calls_before = len(inner.chat_log)
    assert replay.chat([user("first")]).text == r1.text
    assert replay.chat([user("second")]).text == r2.text
    assert np.array_equal(replay.embed(["alpha"])[0], np.asarray(e1[0]))
    assert len(inner.chat_log) == live_calls_before  # replay never hit the backend

    with pytest.raises(ReplayMissError):
        replay.chat([user("novel request")])


def test_record_dedupes_identical_requests(tmp_path):
    fixture = tmp_path / "fixture.jsonl"
    recorder = RecordingProvider(ScriptedProvider(["a", "a"]), fixture)
    recorder.chat([user("same")])
    recorder.chat([user("same")])
    assert len(fixture.read_text().splitlines()) == 1


def _chat_payload():
    return {
        "choices": [
            {
                "message": {
                    "content": None,
                    "tool_calls": [
                        {
                            "id": "call_1",
                            "type": "function",
                            "function": {
                                "name": "qa_retrieval",
                                "arguments": '{"query": "slip days", "top_k": 2}',
                            },
                        }
                    ],
                },
                "logprobs": {
                    "content": [
                        {
                            "token": "yes",
                            "top_logprobs": [
                                {"token": "yes", "logprob": -0.1},
                                {"token": "no", "logprob": -2.4},
                            ],
                        }
                    ]
                },
            }
        ]
    }


def test_openai_provider_wire_format(tmp_path):
    seen = {"count": 0, "payloads": []}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["count"] += 1
        seen["payloads"].append(json.loads(request.content))
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"embedding": [0.1, 0.2]}, {"embedding": [0.3, 0.4]}]})
        return httpx.Response(200, json=_chat_payload())

    client = httpx.Client(transport=httpx.MockTransport(handler))
    provider = OpenAIProvider(
        "https://llm.test/v1", "chat-model", embed_model="embed-model", api_key="k", client=client
    )
    response = provider.chat(
        [user("q")],
        tools=[QA_TOOL],
        tool_choice=ToolChoice.specific("qa_retrieval"),
        want_logprobs=True,
        seed=5,
    )
    assert response.tool_calls[0].name == "qa_retrieval"
    assert response.tool_calls[0].arguments == {"query": "slip days", "top_k": 2}
    assert response.logprobs == (("yes", -0.1), ("no", -2.4))
    sent = seen["payloads"][0]
    assert sent["seed"] == 5 and sent["temperature"] == 0
    assert sent["tool_choice"] == {"type": "function", "function": {"name": "qa_retrieval"}}
    assert sent["logprobs"] is True

    vectors = provider.embed(["a", "b"])
    assert len(vectors) == 2 and vectors[0].shape == (2,)

    # Record with the live transport, then replay with none: counter frozen.
    fixture = tmp_path / "fixture.jsonl"
    recorder = RecordingProvider(provider, fixture)
    recorder.chat([user("recorded")], tools=[QA_TOOL], tool_choice=AUTO)
    count_after_record = seen["count"]
    replay = ReplayProvider(fixture)
    replayed = replay.chat([user("recorded")], tools=[QA_TOOL], tool_choice=AUTO)
    assert replayed.tool_calls[0].name == "qa_retrieval"
    assert seen["count"] == count_after_record  # zero transport activity in replay


def test_openai_provider_error_mapping():
    def handler(request: httpx.Request) -> httpx.Response:
        if b"limited" in request.content:
            return httpx.Response(429, text="slow down")
        return httpx.Response(500, text="boom")

    provider = OpenAIProvider(
        "https://llm.test/v1",
        "m",
        client=httpx.Client(transport=httpx.MockTransport(handler)),
    )
    with pytest.raises(RateLimitError):
        provider.chat([user("limited")])
    with pytest.raises(TransportError):
        provider.chat([user("other")])


def test_rate_limiter_admits_then_blocks():
    now = {"t": 0.0}
    waits = []

    def clock():
        return now["t"]

    def sleep(s):
        waits.append(s)
        now["t"] += s

    limiter = RateLimiter(60, clock=clock, sleep=sleep)  # 1 request/second
    for _ in range(60):
        limiter.acquire()
    assert waits == []
    limiter.acquire()  # bucket empty; must wait ~1s for one token
    assert len(waits) == 1 and abs(waits[0] - 1.0) < 1e-9
