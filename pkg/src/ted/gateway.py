"""Chat-model access: live HTTP, scripted, record and replay providers.

Every stage talks to models through :class:`Provider.complete`, so the whole
pipeline runs offline against a script or a cassette.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Union

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class GatewayError(RuntimeError):
    pass


class ExhaustedRetriesError(GatewayError):
    pass


class MalformedPayloadError(GatewayError):
    pass


class ScriptExhaustedError(GatewayError):
    pass


class CassetteMissError(GatewayError):
    def __init__(self, fingerprint: str, detail: str = "no recorded result"):
        super().__init__(f"cassette miss for fingerprint {fingerprint}: {detail}")
        self.fingerprint = fingerprint


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    tool_payload: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_payload is not None:
            d["tool_payload"] = self.tool_payload
        return d


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    tools: tuple[dict[str, Any], ...] | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2048
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("the first message must have role system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: str
    id: str = ""


@dataclass(frozen=True)
class ChatResult:
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    provider_latency: float = 0.0

    def __post_init__(self) -> None:
        if not self.content and not self.tool_calls:
            raise MalformedPayloadError("chat result has neither content nor tool calls")

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "tool_calls": [{"name": c.name, "arguments": c.arguments, "id": c.id} for c in self.tool_calls],
            "usage": dict(self.usage),
            "provider_latency": self.provider_latency,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChatResult":
        return cls(
            content=data.get("content") or "",
            tool_calls=tuple(
                ToolCall(name=c["name"], arguments=c.get("arguments", ""), id=c.get("id", ""))
                for c in data.get("tool_calls") or ()
            ),
            usage=dict(data.get("usage") or {"prompt_tokens": 0, "completion_tokens": 0}),
            provider_latency=float(data.get("provider_latency", 0.0)),
        )


def fingerprint(request: ChatRequest) -> str:
    """Stable digest of everything that determines a model's reply.

    ``request_tag`` and ``max_output_tokens`` are deliberately left out.
    """
    payload = {
        "model": request.model,
        "messages": [m.to_dict() for m in request.messages],
        "tools": list(request.tools) if request.tools else None,
        "temperature": float(request.temperature),
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Provider:
    """Base class; subclasses implement ``_complete``."""

    def __init__(self) -> None:
        self._stats_lock = threading.Lock()
        self.calls = 0
        self.calls_by_tag: Counter[str] = Counter()

    def complete(self, request: ChatRequest) -> ChatResult:
        with self._stats_lock:
            self.calls += 1
            self.calls_by_tag[request.request_tag] += 1
        return self._complete(request)

    def _complete(self, request: ChatRequest) -> ChatResult:  # pragma: no cover
        raise NotImplementedError

    @property
    def network_calls(self) -> int:
        return 0

    def close(self) -> None:
        pass


ScriptItem = Union[str, ChatResult, dict]


def _as_result(item: ScriptItem) -> ChatResult:
    if isinstance(item, ChatResult):
        return item
    if isinstance(item, str):
        return ChatResult(content=item)
    return ChatResult.from_dict(item)


class ScriptedProvider(Provider):
    """Returns the scripted replies strictly in order, whatever the request."""

    def __init__(self, script: Iterable[ScriptItem]):
        super().__init__()
        self._queue = deque(_as_result(s) for s in script)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _complete(self, request: ChatRequest) -> ChatResult:
        with self._lock:
            if not self._queue:
                raise ScriptExhaustedError(
                    f"script exhausted after {self.calls - 1} calls (request tag {request.request_tag!r})"
                )
            return self._queue.popleft()

    @property
    def remaining(self) -> int:
        return len(self._queue)

    def assert_exhausted(self) -> None:
        if self._queue:
            raise AssertionError(f"{len(self._queue)} scripted replies were never consumed")


class FunctionProvider(Provider):
    """Answers with ``fn(request)``; handy for rule-based fakes."""

    def __init__(self, fn: Callable[[ChatRequest], ScriptItem]):
        super().__init__()
        self._fn = fn

    def _complete(self, request: ChatRequest) -> ChatResult:
        return _as_result(self._fn(request))


class Cassette:
    """Per-fingerprint FIFO of recorded results."""

    def __init__(self, entries: dict[str, list[ChatResult]] | None = None):
        self.entries: dict[str, list[ChatResult]] = defaultdict(list, entries or {})

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries: dict[str, list[ChatResult]] = {}
        for item in raw:
            entries.setdefault(item["fingerprint"], []).extend(ChatResult.from_dict(r) for r in item["results"])
        return cls(entries)

    def dump(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = [
            {"fingerprint": fp, "results": [r.to_dict() for r in results]}
            for fp, results in sorted(self.entries.items())
        ]
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(data, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        tmp.replace(path)


class ReplayProvider(Provider):
    def __init__(self, cassette: Cassette):
        super().__init__()
        self.cassette = cassette
        self._cursor: Counter[str] = Counter()
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayProvider":
        return cls(Cassette.load(path))

    def _complete(self, request: ChatRequest) -> ChatResult:
        fp = fingerprint(request)
        with self._lock:
            results = self.cassette.entries.get(fp)
            if not results:
                raise CassetteMissError(fp, f"unseen request (tag {request.request_tag!r})")
            pos = self._cursor[fp]
            if pos >= len(results):
                raise CassetteMissError(fp, f"all {len(results)} recorded results already replayed")
            self._cursor[fp] += 1
            return results[pos]


class RecordingProvider(Provider):
    """Forwards to ``inner`` and appends every result to a cassette file."""

    def __init__(self, inner: Provider, path: str | Path):
        super().__init__()
        self.inner = inner
        self.path = Path(path)
        self.cassette = Cassette.load(self.path) if self.path.exists() else Cassette()
        self._lock = threading.Lock()

    def _complete(self, request: ChatRequest) -> ChatResult:
        result = self.inner.complete(request)
        with self._lock:
            self.cassette.entries[fingerprint(request)].append(result)
            self.cassette.dump(self.path)
        return result

    @property
    def network_calls(self) -> int:
        return self.inner.network_calls


RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class LiveProvider(Provider):
    """OpenAI-compatible ``/chat/completions`` client with exponential backoff."""

    def __init__(
        self,
        base_url: str = "https://api.openai.com/v1",
        api_key: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._network_calls = 0
        self._net_lock = threading.Lock()

    @property
    def network_calls(self) -> int:
        return self._network_calls

    def backoff(self, attempt: int) -> float:
        """Delay before retry number ``attempt`` (0-based): base * 2**attempt, plus up to 10% jitter."""
        delay = self.backoff_base * (2**attempt)
        return delay + self._rng.uniform(0, 0.1 * delay)

    def _complete(self, request: ChatRequest) -> ChatResult:
        body = to_wire(request)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = ""
        for attempt in range(self.max_attempts):
            started = time.monotonic()
            try:
                with self._net_lock:
                    self._network_calls += 1
                response = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc!r}"
            else:
                if response.status_code in RETRYABLE_STATUS:
                    last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                elif response.status_code >= 400:
                    raise GatewayError(f"HTTP {response.status_code}: {response.text[:500]}")
                else:
                    try:
                        payload = response.json()
                    except ValueError as exc:
                        raise MalformedPayloadError(f"response is not JSON: {response.text[:200]}") from exc
                    return from_wire(payload, latency=time.monotonic() - started)
            if attempt + 1 < self.max_attempts:
                delay = self.backoff(attempt)
                logger.warning("%s; retrying in %.1fs (attempt %d/%d)", last_error, delay, attempt + 1, self.max_attempts)
                self._sleep(delay)
        raise ExhaustedRetriesError(f"gave up after {self.max_attempts} attempts; last error: {last_error}")

    def close(self) -> None:
        self._client.close()


def to_wire(request: ChatRequest) -> dict[str, Any]:
    messages = []
    for m in request.messages:
        wire: dict[str, Any] = {"role": m.role, "content": m.content}
        payload = m.tool_payload or {}
        if m.role == "assistant" and payload.get("tool_calls"):
            wire["content"] = m.content or None
            wire["tool_calls"] = [
                {
                    "id": c.get("id", ""),
                    "type": "function",
                    "function": {"name": c["name"], "arguments": c.get("arguments", "")},
                }
                for c in payload["tool_calls"]
            ]
        elif m.role == "tool":
            wire["tool_call_id"] = payload.get("tool_call_id", "")
        messages.append(wire)
    body: dict[str, Any] = {
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }
    if request.tools:
        body["tools"] = list(request.tools)
    return body


def from_wire(payload: Any, latency: float = 0.0) -> ChatResult:
    try:
        message = payload["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedPayloadError(f"no choices[0].message in provider payload: {str(payload)[:200]}") from exc
    calls = []
    for c in message.get("tool_calls") or ():
        try:
            calls.append(ToolCall(name=c["function"]["name"], arguments=c["function"].get("arguments") or "", id=c.get("id", "")))
        except (KeyError, TypeError) as exc:
            raise MalformedPayloadError(f"malformed tool call block: {c!r}") from exc
    usage = payload.get("usage") or {}
    return ChatResult(
        content=message.get("content") or "",
        tool_calls=tuple(calls),
        usage={
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        },
        provider_latency=latency,
    )


def make_provider(spec: str, **live_options: Any) -> Provider:
    """Build a provider from a ``--provider`` value.

    ``live`` | ``scripted:<path>`` | ``replay:<path>`` | ``record:<path>``
    """
    kind, _, arg = spec.partition(":")
    if kind == "live":
        return LiveProvider(**live_options)
    if kind == "scripted":
        return ScriptedProvider.from_file(arg)
    if kind == "replay":
        return ReplayProvider.from_file(arg)
    if kind == "record":
        return RecordingProvider(LiveProvider(**live_options), arg)
    raise ValueError(f"unknown provider spec {spec!r}")
