"""Chat-completion gateway over interchangeable backends.

Every LLM call in the pipeline goes through :class:`Gateway.complete`. Calls
are cached by a content hash of the request so that any run can be replayed
offline from the JSONL cache file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "RECPROMPT_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
ROLE_TAGS = ("recommender", "optimizer", "evaluator")
BACKENDS = ("live", "mock", "replay")

MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


class GatewayError(RuntimeError):
    pass


class ConfigError(GatewayError):
    pass


class CacheMissError(GatewayError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no cached response for request key {key}")


class TransportFailure(GatewayError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"invalid message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    # cache-key only; never sent over the wire
    salt: str = ""

    def __post_init__(self):
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"invalid role tag {self.role_tag!r}")
        if not self.messages:
            raise ValueError("messages must be nonempty")
        object.__setattr__(self, "messages", tuple(self.messages))
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def single(cls, role_tag: str, model: str, prompt: str, **kwargs) -> "ChatRequest":
        return cls(role_tag, model, (Message("user", prompt),), **kwargs)

    @property
    def last_user_message(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.content
        return ""


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    source: str = "mock"

    def to_dict(self) -> dict:
        return {
            "content": self.content,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_ms": self.latency_ms,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChatResponse":
        return cls(
            content=data["content"],
            prompt_tokens=int(data.get("prompt_tokens", 0)),
            completion_tokens=int(data.get("completion_tokens", 0)),
            latency_ms=int(data.get("latency_ms", 0)),
            source=data.get("source", "cache"),
        )


def canonical_key(request: ChatRequest) -> str:
    """Content hash of a request.

    The role tag is excluded; trailing whitespace of message bodies is ignored.
    """
    payload = {
        "model": request.model,
        "temperature": float(request.temperature),
        "max_tokens": int(request.max_tokens),
        "messages": [[m.role, m.content.rstrip()] for m in request.messages],
    }
    if request.salt:
        payload["salt"] = request.salt
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL cache of responses keyed by :func:`canonical_key`.

    Reads are lock-free dict lookups; writes are serialized and skip keys that
    are already present so a response is stored at most once.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.writes = 0
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("%s:%d: skipping corrupt cache line", self.path, lineno)
                        continue
                    self._entries.setdefault(entry["key"], entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> ChatResponse | None:
        entry = self._entries.get(key)
        return ChatResponse.from_dict(entry["response"]) if entry else None

    def put(self, key: str, response: ChatResponse) -> bool:
        with self._lock:
            if key in self._entries:
                return False
            entry = {
                "key": key,
                "response": response.to_dict(),
                "stored_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            }
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            self._entries[key] = entry
            self.writes += 1
            return True

    def entries(self) -> Iterable[dict]:
        return list(self._entries.values())

    def stats(self) -> dict:
        sources = Counter(e["response"].get("source", "?") for e in self._entries.values())
        return {
            "path": str(self.path) if self.path else None,
            "entries": len(self._entries),
            "by_source": dict(sorted(sources.items())),
            "prompt_tokens": sum(e["response"].get("prompt_tokens", 0) for e in self._entries.values()),
            "completion_tokens": sum(
                e["response"].get("completion_tokens", 0) for e in self._entries.values()
            ),
        }


class TokenBucket:
    """Blocking token-bucket rate limiter."""

    def __init__(
        self,
        rate_per_minute: float = 30.0,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate_per_minute <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, rate_per_minute / 60.0)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping as needed. Returns total seconds waited."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                delay = (1.0 - self._tokens) / self.rate
            self._sleep(delay)
            waited += delay


MockFn = Callable[[ChatRequest], str]


class MockBackend:
    """Deterministic backend: each role tag maps to a pure function of the request."""

    def __init__(self, handlers: Mapping[str, MockFn] | None = None, default: MockFn | None = None):
        self.handlers = dict(handlers or {})
        self.default = default

    def register(self, role_tag: str, fn: MockFn) -> None:
        self.handlers[role_tag] = fn

    def __call__(self, request: ChatRequest) -> str:
        fn = self.handlers.get(request.role_tag, self.default)
        if fn is None:
            raise ConfigError(f"no mock handler registered for role {request.role_tag!r}")
        return fn(request)


def echo_last_user_message(request: ChatRequest) -> str:
    return request.last_user_message


class RetryableStatus(Exception):
    def __init__(self, status: int, retry_after: float | None, body: str):
        self.status = status
        self.retry_after = retry_after
        super().__init__(f"HTTP {status}: {body[:200]}")


def _retry_after_seconds(headers: Mapping[str, str]) -> float | None:
    value = headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class OpenAICompatibleTransport:
    """Minimal client for ``POST /v1/chat/completions``."""

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key: str | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if not api_key:
            raise ConfigError(f"live backend needs an API key in ${API_KEY_ENV}")
        base = base_url.rstrip("/")
        self.url = base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"},
        )

    def send(self, request: ChatRequest) -> tuple[str, int, int]:
        payload = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        resp = self._client.post(self.url, json=payload)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableStatus(resp.status_code, _retry_after_seconds(resp.headers), resp.text)
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
        data = resp.json()
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc!r}") from None
        if content is None:
            raise GatewayError("completion payload has no content")
        usage = data.get("usage") or {}
        return content, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))

    def close(self) -> None:
        self._client.close()


@dataclass
class GatewayStats:
    by_source: Counter = field(default_factory=Counter)
    transport_calls: int = 0
    retries: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, source: str) -> None:
        with self.lock:
            self.by_source[source] += 1


class Gateway:
    """Uniform ``complete()`` regardless of backend.

    ``max_in_flight`` bounds concurrent transport operations (live HTTP calls
    or mock invocations). The rate limiter applies to live calls only.
    """

    def __init__(
        self,
        backend: str = "mock",
        *,
        cache: ResponseCache | None = None,
        mock: MockBackend | None = None,
        transport: OpenAICompatibleTransport | None = None,
        max_in_flight: int = 8,
        rate_limiter: TokenBucket | None = None,
        sleep: Callable[[float], None] = time.sleep,
        max_attempts: int = MAX_ATTEMPTS,
    ):
        if backend not in BACKENDS:
            raise ConfigError(f"unknown backend {backend!r}; expected one of {', '.join(BACKENDS)}")
        if backend == "mock" and mock is None:
            raise ConfigError("mock backend requires mock handlers")
        if backend == "live" and transport is None:
            raise ConfigError("live backend requires a transport")
        if backend == "replay" and cache is None:
            raise ConfigError("replay backend requires a cache")
        self.backend = backend
        self.cache = cache
        self.mock = mock
        self.transport = transport
        self.rate_limiter = rate_limiter
        self.max_attempts = max_attempts
        self._sleep = sleep
        self._in_flight = threading.BoundedSemaphore(max_in_flight)
        self.stats = GatewayStats()

    @classmethod
    def live(
        cls,
        base_url: str = DEFAULT_BASE_URL,
        *,
        cache: ResponseCache | None = None,
        http_transport: httpx.BaseTransport | None = None,
        api_key: str | None = None,
        requests_per_minute: float | None = 30.0,
        **kwargs,
    ) -> "Gateway":
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        transport = OpenAICompatibleTransport(base_url, key, transport=http_transport)
        limiter = TokenBucket(requests_per_minute) if requests_per_minute else None
        return cls("live", cache=cache, transport=transport, rate_limiter=limiter, **kwargs)

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = canonical_key(request)
        if self.backend == "replay":
            cached = self.cache.get(key)
            if cached is None:
                raise CacheMissError(key)
            self.stats.bump("cache")
            return _with_source(cached, "cache")

        if self.backend == "live":
            if self.cache is not None:
                cached = self.cache.get(key)
                if cached is not None:
                    self.stats.bump("cache")
                    return _with_source(cached, "cache")
            response = self._complete_live(request)
        else:
            start = time.perf_counter()
            with self._in_flight:
                with self.stats.lock:
                    self.stats.transport_calls += 1
                content = self.mock(request)
            response = ChatResponse(
                content=content,
                prompt_tokens=sum(len(m.content.split()) for m in request.messages),
                completion_tokens=len(content.split()),
                latency_ms=int((time.perf_counter() - start) * 1000),
                source="mock",
            )

        if self.cache is not None:
            self.cache.put(key, response)
        self.stats.bump(response.source)
        return response

    def _complete_live(self, request: ChatRequest) -> ChatResponse:
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            start = time.perf_counter()
            try:
                with self._in_flight:
                    with self.stats.lock:
                        self.stats.transport_calls += 1
                    content, p_tok, c_tok = self.transport.send(request)
            except RetryableStatus as exc:
                last_error = exc
                delay = exc.retry_after if exc.status == 429 and exc.retry_after is not None else None
            except httpx.TransportError as exc:
                last_error = exc
                delay = None
            else:
                return ChatResponse(
                    content=content,
                    prompt_tokens=p_tok,
                    completion_tokens=c_tok,
                    latency_ms=int((time.perf_counter() - start) * 1000),
                    source="live",
                )
            if attempt == self.max_attempts:
                break
            if delay is None:
                delay = BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1)
            logger.warning("attempt %d/%d failed (%s); retrying in %.1fs",
                           attempt, self.max_attempts, last_error, delay)
            with self.stats.lock:
                self.stats.retries += 1
            self._sleep(delay)
        raise TransportFailure(str(last_error), self.max_attempts)


def _with_source(response: ChatResponse, source: str) -> ChatResponse:
    return ChatResponse(
        response.content, response.prompt_tokens, response.completion_tokens, response.latency_ms, source
    )
