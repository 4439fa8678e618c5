"""Chat-completion and embedding backends with tool calling, first-token
log-probabilities, and deterministic record/replay for hermetic tests.

Every backend implements the same two-method ``Provider`` surface. The
module-level operations (:func:`chat_complete`, :func:`embed`,
:func:`yes_probability`) add contract enforcement and retries on top of it,
so pipelines never talk to a backend directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")

#: Probability assigned when the yes token is missing from the reported
#: top logprobs; keeps rerank orderings total instead of undefined.
YES_FLOOR = 1e-6


class ProviderError(Exception):
    """Base class for all backend failures."""


class TransportError(ProviderError):
    """Network or HTTP failure talking to a live backend."""


class RateLimitError(TransportError):
    """Backend asked us to slow down (HTTP 429)."""


class ToolContractError(ProviderError):
    """Response violated the tool_choice contract after retries."""


class ReplayMissError(ProviderError):
    """Replay fixture has no entry for the request hash."""


class ScriptExhaustedError(ProviderError):
    """ScriptedProvider ran out of scripted responses."""


# ---------------------------------------------------------------------------
# Messages, tools, responses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolCall:
    """One tool invocation emitted by the model."""

    name: str
    arguments: dict[str, Any]
    id: str = ""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    tool_call_id: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool message requires tool_call_id")


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def assistant(content: str = "", tool_calls: Sequence[ToolCall] = ()) -> ChatMessage:
    return ChatMessage("assistant", content, tool_calls=tuple(tool_calls))


def tool_result(content: str, tool_call_id: str) -> ChatMessage:
    return ChatMessage("tool", content, tool_call_id=tool_call_id)


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str  # "string" or "integer"
    required: bool = True
    description: str = ""


@dataclass(frozen=True)
class ToolSchema:
    """Declaration of one callable tool, serializable to the OpenAI shape."""

    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def to_openai(self) -> dict[str, Any]:
        props = {}
        required = []
        for p in self.parameters:
            props[p.name] = {"type": p.type, "description": p.description}
            if p.required:
                required.append(p.name)
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": props,
                    "required": required,
                },
            },
        }


@dataclass(frozen=True)
class ToolChoice:
    """Contract for whether the model may, must, or must not call a tool."""

    mode: str  # auto | required | none | specific
    name: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("auto", "required", "none", "specific"):
            raise ValueError(f"unknown tool_choice mode {self.mode!r}")
        if self.mode == "specific" and not self.name:
            raise ValueError("specific tool_choice requires a name")

    @classmethod
    def specific(cls, name: str) -> "ToolChoice":
        return cls("specific", name)


AUTO = ToolChoice("auto")
REQUIRED = ToolChoice("required")
NONE = ToolChoice("none")


@dataclass(frozen=True)
class CompletionResponse:
    """What came back from one chat call.

    ``logprobs`` holds (token, logprob) candidates for the first generated
    token when they were requested and the backend reports them.
    """

    text: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    logprobs: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.text is None and not self.tool_calls:
            raise ValueError("response must carry text or tool calls")


def text_response(text: str, logprobs: Iterable[tuple[str, float]] | None = None) -> CompletionResponse:
    return CompletionResponse(text=text, logprobs=tuple(logprobs) if logprobs is not None else None)


def tool_call_response(*calls: ToolCall, text: str | None = None) -> CompletionResponse:
    return CompletionResponse(text=text, tool_calls=tuple(calls))


# ---------------------------------------------------------------------------
# Provider surface and module-level operations
# ---------------------------------------------------------------------------


class Provider:
    """Two-method backend surface shared by live, scripted, and replay modes."""

    def chat(
        self,
        messages: Sequence[ChatMessage],
        *,
        tools: Sequence[ToolSchema] | None = None,
        tool_choice: ToolChoice = NONE,
        want_logprobs: bool = False,
        seed: int = 0,
    ) -> CompletionResponse:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        raise NotImplementedError


def _violates_contract(response: CompletionResponse, tool_choice: ToolChoice) -> str | None:
    if tool_choice.mode in ("required", "specific") and not response.tool_calls:
        return f"tool_choice={tool_choice.mode} but response made no tool call"
    if tool_choice.mode == "specific":
        wrong = [c.name for c in response.tool_calls if c.name != tool_choice.name]
        if wrong:
            return f"tool_choice=specific({tool_choice.name}) but response called {wrong}"
    if tool_choice.mode == "none" and response.text is None:
        return "tool_choice=none but response carried no text"
    return None


def chat_complete(
    provider: Provider,
    messages: Sequence[ChatMessage],
    *,
    tools: Sequence[ToolSchema] | None = None,
    tool_choice: ToolChoice = NONE,
    want_logprobs: bool = False,
    seed: int = 0,
    transport_attempts: int = 3,
    backoff_base: float = 1.0,
    contract_retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    """One chat call with transport retries and tool_choice enforcement.

    Transport and rate-limit failures are retried ``transport_attempts``
    times with exponential backoff starting at ``backoff_base`` seconds.
    A response that violates the tool_choice contract is re-requested up to
    ``contract_retries`` times, then surfaced as :class:`ToolContractError`.
    """
    if not messages:
        raise ValueError("messages must be non-empty")
    if tool_choice.mode != "none" and tools is None:
        raise ValueError(f"tool_choice={tool_choice.mode} requires tools")

    last_violation = None
    for contract_attempt in range(1 + contract_retries):
        response = None
        for transport_attempt in range(transport_attempts):
            try:
                response = provider.chat(
                    messages,
                    tools=tools,
                    tool_choice=tool_choice,
                    want_logprobs=want_logprobs,
                    seed=seed,
                )
                break
            except (RateLimitError, TransportError) as exc:
                if transport_attempt == transport_attempts - 1:
                    raise
                delay = backoff_base * (2**transport_attempt)
                logger.warning("transport failure (%s); retrying in %.1fs", exc, delay)
                sleep(delay)
        assert response is not None
        last_violation = _violates_contract(response, tool_choice)
        if last_violation is None:
            return response
        if contract_attempt < contract_retries:
            logger.warning("contract violation (%s); re-asking", last_violation)
    raise ToolContractError(f"{last_violation} after {contract_retries} retries")


def embed(provider: Provider, texts: Sequence[str]) -> list[np.ndarray]:
    """Embed a batch of texts, validating shape uniformity and finiteness."""
    if not texts:
        raise ValueError("texts must be non-empty")
    vectors = [np.asarray(v, dtype=np.float64) for v in provider.embed(texts)]
    if len(vectors) != len(texts):
        raise ProviderError(f"expected {len(texts)} vectors, got {len(vectors)}")
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise ProviderError(f"embedding dimension mismatch across batch: {sorted(dims)}")
    for v in vectors:
        if not np.all(np.isfinite(v)):
            raise ProviderError("embedding contains non-finite entries")
    return vectors


RELEVANCE_QUESTION = "Is this document relevant for answering the student question?"


def yes_probability(
    provider: Provider,
    question: str,
    document: str,
    *,
    floor: float = YES_FLOOR,
    seed: int = 0,
) -> float:
    """Probability that the model answers "yes" to the relevance question.

    Sums exp(logprob) over case variants of the yes token among the reported
    first-token candidates. A missing yes token scores the configured floor
    so downstream rank orders stay total.
    """
    prompt = (
        f"Student question:\n{question}\n\n"
        f"Document:\n{document}\n\n"
        f"{RELEVANCE_QUESTION} Answer yes or no."
    )
    response = chat_complete(
        provider, [user(prompt)], want_logprobs=True, seed=seed
    )
    if response.logprobs is None:
        raise ProviderError("backend did not report first-token logprobs")
    p = sum(math.exp(lp) for token, lp in response.logprobs if token.strip().lower() == "yes")
    if p == 0.0:
        logger.warning("yes token absent from top logprobs; flooring to %g", floor)
        return floor
    return min(p, 1.0)


# ---------------------------------------------------------------------------
# Canonical hashing and fixture serialization
# ---------------------------------------------------------------------------


def _canon(obj: Any) -> Any:
    if isinstance(obj, str):
        return " ".join(obj.split())
    if isinstance(obj, dict):
        return {k: _canon(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def _message_dict(m: ChatMessage) -> dict[str, Any]:
    d: dict[str, Any] = {"role": m.role, "content": m.content}
    if m.tool_call_id:
        d["tool_call_id"] = m.tool_call_id
    if m.tool_calls:
        d["tool_calls"] = [
            {"id": c.id, "name": c.name, "arguments": c.arguments} for c in m.tool_calls
        ]
    return d


def chat_request_dict(
    messages: Sequence[ChatMessage],
    tools: Sequence[ToolSchema] | None,
    tool_choice: ToolChoice,
    want_logprobs: bool,
    seed: int,
) -> dict[str, Any]:
    return {
        "kind": "chat",
        "messages": [_message_dict(m) for m in messages],
        "tools": [t.to_openai() for t in tools] if tools is not None else None,
        "tool_choice": {"mode": tool_choice.mode, "name": tool_choice.name},
        "want_logprobs": want_logprobs,
        "seed": seed,
    }


def request_hash(request: dict[str, Any]) -> str:
    """Canonical hash of a request: whitespace runs and key order do not matter."""
    payload = json.dumps(_canon(request), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def response_to_dict(response: CompletionResponse) -> dict[str, Any]:
    return {
        "text": response.text,
        "tool_calls": [
            {"id": c.id, "name": c.name, "arguments": c.arguments}
            for c in response.tool_calls
        ],
        "logprobs": [[t, lp] for t, lp in response.logprobs]
        if response.logprobs is not None
        else None,
    }


def response_from_dict(d: dict[str, Any]) -> CompletionResponse:
    return CompletionResponse(
        text=d.get("text"),
        tool_calls=tuple(
            ToolCall(c["name"], c["arguments"], c.get("id", ""))
            for c in d.get("tool_calls", [])
        ),
        logprobs=tuple((t, float(lp)) for t, lp in d["logprobs"])
        if d.get("logprobs") is not None
        else None,
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ScriptedProvider(Provider):
    """Deterministic in-memory backend for tests.

    Chat responses come from ``script`` (consumed in order; entries may be
    :class:`CompletionResponse`, plain strings, or callables receiving the
    request dict), falling back to ``default_chat`` when the script is empty.
    Embeddings are a pure hash of the input text, so identical texts always
    embed identically.
    """

    def __init__(
        self,
        script: Iterable[Any] = (),
        *,
        embed_dim: int = 8,
        default_chat: Callable[[dict[str, Any]], CompletionResponse] | None = None,
    ) -> None:
        self._script = list(script)
        self.embed_dim = embed_dim
        self.default_chat = default_chat
        self.chat_log: list[dict[str, Any]] = []
        self.embed_log: list[list[str]] = []

    def chat(self, messages, *, tools=None, tool_choice=NONE, want_logprobs=False, seed=0):
        request = chat_request_dict(messages, tools, tool_choice, want_logprobs, seed)
        self.chat_log.append(request)
        if self._script:
            entry = self._script.pop(0)
        elif self.default_chat is not None:
            entry = self.default_chat
        else:
            raise ScriptExhaustedError(f"no scripted response for call #{len(self.chat_log)}")
        if callable(entry):
            entry = entry(request)
        if isinstance(entry, str):
            entry = CompletionResponse(text=entry)
        return entry

    def embed(self, texts):
        self.embed_log.append(list(texts))
        return [self._embed_one(t) for t in texts]

    def _embed_one(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return rng.uniform(-1.0, 1.0, size=self.embed_dim)


class RecordingProvider(Provider):
    """Wraps a live backend and appends one fixture entry per request hash."""

    def __init__(self, inner: Provider, fixture_path: str | Path) -> None:
        self.inner = inner
        self.fixture_path = Path(fixture_path)
        self._lock = threading.Lock()
        self._seen: set[str] = set()

    def _record(self, request: dict[str, Any], response_payload: Any) -> None:
        h = request_hash(request)
        with self._lock:
            if h in self._seen:
                return
            self._seen.add(h)
            entry = {"hash": h, "request": request, "response": response_payload}
            with open(self.fixture_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def chat(self, messages, *, tools=None, tool_choice=NONE, want_logprobs=False, seed=0):
        response = self.inner.chat(
            messages, tools=tools, tool_choice=tool_choice, want_logprobs=want_logprobs, seed=seed
        )
        request = chat_request_dict(messages, tools, tool_choice, want_logprobs, seed)
        self._record(request, response_to_dict(response))
        return response

    def embed(self, texts):
        vectors = self.inner.embed(texts)
        request = {"kind": "embed", "texts": list(texts)}
        self._record(request, [np.asarray(v).tolist() for v in vectors])
        return vectors


class ReplayProvider(Provider):
    """Answers exclusively from a recorded fixture; never touches a network."""

    def __init__(self, fixture_path: str | Path) -> None:
        self.fixture_path = Path(fixture_path)
        self._entries: dict[str, Any] = {}
        with open(self.fixture_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._entries.setdefault(entry["hash"], entry["response"])
        self.calls = 0

    def _lookup(self, request: dict[str, Any]) -> Any:
        h = request_hash(request)
        if h not in self._entries:
            raise ReplayMissError(f"no fixture entry for {request['kind']} request {h}")
        self.calls += 1
        return self._entries[h]

    def chat(self, messages, *, tools=None, tool_choice=NONE, want_logprobs=False, seed=0):
        request = chat_request_dict(messages, tools, tool_choice, want_logprobs, seed)
        return response_from_dict(self._lookup(request))

    def embed(self, texts):
        payload = self._lookup({"kind": "embed", "texts": list(texts)})
        return [np.asarray(v, dtype=np.float64) for v in payload]


class RateLimiter:
    """Token bucket admitting ``requests_per_minute`` requests."""

    def __init__(
        self,
        requests_per_minute: float,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.rate = requests_per_minute / 60.0
        self.capacity = float(requests_per_minute)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class OpenAIProvider(Provider):
    """Live OpenAI-compatible HTTP backend (chat completions + embeddings)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        embed_model: str = "",
        api_key: str = "",
        timeout: float = 60.0,
        top_logprobs: int = 20,
        rate_limiter: RateLimiter | None = None,
        client: httpx.Client | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.embed_model = embed_model
        self.top_logprobs = top_logprobs
        self.rate_limiter = rate_limiter
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        try:
            resp = self._client.post(
                f"{self.base_url}{path}", json=payload, headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimitError(f"rate limited: {resp.text}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text}")
        return resp.json()

    @staticmethod
    def _wire_tool_choice(tool_choice: ToolChoice) -> Any:
        if tool_choice.mode == "specific":
            return {"type": "function", "function": {"name": tool_choice.name}}
        return tool_choice.mode

    def chat(self, messages, *, tools=None, tool_choice=NONE, want_logprobs=False, seed=0):
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [self._wire_message(m) for m in messages],
            "temperature": 0,
            "seed": seed,
        }
        if tools is not None:
            payload["tools"] = [t.to_openai() for t in tools]
            payload["tool_choice"] = self._wire_tool_choice(tool_choice)
        if want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.top_logprobs
        data = self._post("/chat/completions", payload)
        choice = data["choices"][0]
        message = choice["message"]
        calls = tuple(
            ToolCall(
                c["function"]["name"],
                json.loads(c["function"]["arguments"] or "{}"),
                c.get("id", ""),
            )
            for c in message.get("tool_calls") or ()
        )
        logprobs = None
        lp_content = (choice.get("logprobs") or {}).get("content") or []
        if lp_content:
            logprobs = tuple(
                (alt["token"], float(alt["logprob"]))
                for alt in lp_content[0].get("top_logprobs", [])
            )
        return CompletionResponse(
            text=message.get("content"), tool_calls=calls, logprobs=logprobs
        )

    @staticmethod
    def _wire_message(m: ChatMessage) -> dict[str, Any]:
        d: dict[str, Any] = {"role": m.role, "content": m.content}
        if m.tool_call_id:
            d["tool_call_id"] = m.tool_call_id
        if m.tool_calls:
            d["tool_calls"] = [
                {
                    "id": c.id,
                    "type": "function",
                    "function": {"name": c.name, "arguments": json.dumps(c.arguments)},
                }
                for c in m.tool_calls
            ]
        return d

    def embed(self, texts):
        data = self._post("/embeddings", {"model": self.embed_model, "input": list(texts)})
        return [np.asarray(item["embedding"], dtype=np.float64) for item in data["data"]]
