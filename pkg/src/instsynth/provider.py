"""Model backends: chat completion with text and image parts, retry with
exponential backoff, token/cost accounting and a record/replay cache.

Every model call in the package goes through an object with a
``complete(request) -> ModelResponse`` method.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .core import InstsynthError, TokenUsage, canonical_json


class ProviderError(InstsynthError):
    pass


class RateLimited(ProviderError):
    pass


class ProviderTimeout(ProviderError):
    pass


class AuthFailure(ProviderError):
    pass


class ReplayMiss(ProviderError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[TextPart | ImagePart, ...]

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))

    @classmethod
    def text(cls, role: str, text: str) -> "Message":
        return cls(role, (TextPart(text),))

    @property
    def text_content(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_dict(self, embed_images: bool = False) -> dict:
        messages = []
        for msg in self.messages:
            parts = []
            for p in msg.parts:
                if isinstance(p, TextPart):
                    parts.append({"type": "text", "text": p.text})
                else:
                    d = {
                        "type": "image",
                        "media_type": p.media_type,
                        "sha256": hashlib.sha256(p.data).hexdigest(),
                        "size": len(p.data),
                    }
                    if embed_images:
                        d["data"] = base64.b64encode(p.data).decode("ascii")
                    parts.append(d)
            messages.append({"role": msg.role, "parts": parts})
        return {
            "model_id": self.model_id,
            "messages": messages,
            "temperature": float(self.temperature),
            "max_output_tokens": self.max_output_tokens,
        }


@dataclass(frozen=True)
class ModelResponse:
    text: str
    usage: TokenUsage = field(default_factory=TokenUsage)
    latency_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"text": self.text, "usage": self.usage.to_dict(), "latency_seconds": self.latency_seconds}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelResponse":
        return cls(d["text"], TokenUsage(**d["usage"]), float(d.get("latency_seconds", 0.0)))


class Provider(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


def request_digest(request: ModelRequest) -> str:
    """SHA-256 over the canonical request serialization (image bytes included via their hash)."""
    return hashlib.sha256(canonical_json(request.to_dict())).hexdigest()


@dataclass(frozen=True)
class PriceSheet:
    usd_per_million_input: float = 0.0
    usd_per_million_output: float = 0.0

    def __post_init__(self):
        if self.usd_per_million_input < 0 or self.usd_per_million_output < 0:
            raise ValueError("prices must be non-negative")


def estimate_cost(usage: TokenUsage, prices: PriceSheet) -> float:
    return (
        usage.input_tokens * prices.usd_per_million_input / 1e6
        + usage.output_tokens * prices.usd_per_million_output / 1e6
    )


# ---------------------------------------------------------------------------
# retry

@dataclass(frozen=True)
class Backoff:
    base_seconds: float = 1.0
    factor: float = 2.0
    max_attempts: int = 5

    def delays(self) -> list[float]:
        return [self.base_seconds * self.factor**i for i in range(self.max_attempts - 1)]


class _Transient(Exception):
    def __init__(self, exc: ProviderError):
        self.exc = exc


def with_backoff(call: Callable[[], Any], backoff: Backoff, sleep: Callable[[float], None] = time.sleep):
    """Run ``call``; on ``_Transient`` sleep and retry, re-raising the wrapped error at the end."""
    delays = backoff.delays()
    for attempt in range(backoff.max_attempts):
        try:
            return call()
        except _Transient as t:
            if attempt == backoff.max_attempts - 1:
                raise t.exc from None
            sleep(delays[attempt])


class HttpChatProvider:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_seconds: float = 120.0,
        backoff: Backoff = Backoff(),
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.backoff = backoff
        self.sleep = sleep
        self._client = httpx.Client(timeout=timeout_seconds, transport=transport)

    def _payload(self, request: ModelRequest) -> dict:
        messages = []
        for msg in request.messages:
            content = []
            for p in msg.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                else:
                    b64 = base64.b64encode(p.data).decode("ascii")
                    content.append(
                        {"type": "image_url", "image_url": {"url": f"data:{p.media_type};base64,{b64}"}}
                    )
            messages.append({"role": msg.role, "content": content})
        payload: dict[str, Any] = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            payload["max_tokens"] = request.max_output_tokens
        return payload

    def complete(self, request: ModelRequest) -> ModelResponse:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthFailure(f"environment variable {self.api_key_env} is not set")
        payload = self._payload(request)
        headers = {"Authorization": f"Bearer {key}"}

        def attempt() -> ModelResponse:
            start = time.perf_counter()
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
            except httpx.TimeoutException as e:
                raise _Transient(ProviderTimeout(str(e)))
            except httpx.TransportError as e:
                raise _Transient(ProviderError(f"transport error: {e}"))
            if resp.status_code in (401, 403):
                raise AuthFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code == 429:
                raise _Transient(RateLimited("rate limited after retries"))
            if resp.status_code >= 500:
                raise _Transient(ProviderError(f"HTTP {resp.status_code}"))
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            body = resp.json()
            text = body["choices"][0]["message"].get("content") or ""
            usage = body.get("usage") or {}
            return ModelResponse(
                text=text,
                usage=TokenUsage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
                latency_seconds=time.perf_counter() - start,
            )

        return with_backoff(attempt, self.backoff, self.sleep)


# ---------------------------------------------------------------------------
# record / replay

class CacheMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


class ReplayCache:
    """Directory with one ``<digest>.json`` file per cached request/response pair."""

    def __init__(self, directory: str | os.PathLike, mode: CacheMode | str = CacheMode.REPLAY):
        self.directory = Path(directory)
        self.mode = CacheMode(mode)
        self._write_lock = threading.Lock()
        if self.mode is CacheMode.RECORD:
            self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> ModelResponse | None:
        path = self.path_for(digest)
        if not path.exists():
            return None
        return ModelResponse.from_dict(json.loads(path.read_text("utf-8"))["response"])

    def put(self, request: ModelRequest, response: ModelResponse) -> None:
        digest = request_digest(request)
        data = canonical_json(
            {"digest": digest, "request": request.to_dict(), "response": response.to_dict()}
        )
        with self._write_lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, self.path_for(digest))

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json")) if self.directory.exists() else 0


class CachedProvider:
    """Wrap a live provider with a replay cache.

    replay: cached answers only, a miss raises ``ReplayMiss`` and the inner
    provider is never touched. record: cached answers when present, otherwise
    call the inner provider and persist. passthrough: no cache at all.
    """

    def __init__(self, inner: Provider | None, cache: ReplayCache):
        self.inner = inner
        self.cache = cache

    def complete(self, request: ModelRequest) -> ModelResponse:
        mode = self.cache.mode
        if mode is CacheMode.PASSTHROUGH:
            return self._live(request)
        digest = request_digest(request)
        cached = self.cache.get(digest)
        if cached is not None:
            return cached
        if mode is CacheMode.REPLAY:
            raise ReplayMiss(f"no cached response for request {digest[:12]}")
        response = self._live(request)
        self.cache.put(request, response)
        return self.cache.get(digest)

    def _live(self, request: ModelRequest) -> ModelResponse:
        if self.inner is None:
            raise ProviderError("no live provider configured")
        return self.inner.complete(request)


# ---------------------------------------------------------------------------
# scripted provider for offline runs and tests

def approx_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4)) if text else 0


def request_text(request: ModelRequest) -> str:
    return "\n".join(m.text_content for m in request.messages)


Script = Sequence[str] | Mapping[str, Sequence[str]] | Callable[[ModelRequest], str]


class ScriptedProvider:
    """Deterministic stand-in for a model.

    ``script`` may be a list of responses served in order, a mapping from
    request kind (see ``prompts.classify_request``) to such lists, or a
    callable ``request -> text``. Token usage is a character-count estimate.
    """

    def __init__(self, script: Script):
        self._lock = threading.Lock()
        self.calls: list[ModelRequest] = []
        if callable(script):
            self._fn = script
        elif isinstance(script, Mapping):
            queues = {k: list(v) for k, v in script.items()}
            self._fn = lambda req: self._pop_kind(queues, req)
        else:
            queue = list(script)
            self._fn = lambda req: self._pop(queue, "any")

    @staticmethod
    def _pop(queue: list[str], kind: str) -> str:
        if not queue:
            raise ProviderError(f"scripted provider ran out of {kind!r} responses")
        return queue.pop(0)

    def _pop_kind(self, queues: dict[str, list[str]], req: ModelRequest) -> str:
        from .prompts import classify_request

        kind = classify_request(req)
        if kind not in queues:
            raise ProviderError(f"scripted provider has no responses for {kind!r} requests")
        return self._pop(queues[kind], kind)

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self.calls.append(request)
            text = self._fn(request)
        usage = TokenUsage(approx_tokens(request_text(request)), approx_tokens(text))
        return ModelResponse(text, usage, 0.0)


def user_message(texts: Iterable[str], images: Iterable[ImagePart] = ()) -> Message:
    parts: list[TextPart | ImagePart] = [TextPart(t) for t in texts]
    parts.extend(images)
    return Message("user", tuple(parts))
