"""Chat-completion and embedding clients, over HTTP or as deterministic mocks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from .text import words

log = logging.getLogger(__name__)

ROLES = frozenset({"system", "user", "assistant"})


class ClientError(Exception):
    """Base class for model-client failures."""


class TransportError(ClientError):
    """Retries exhausted on a transient failure."""


class ServiceError(ClientError):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(f"service returned {status}: {message}")
        self.status = status
        self.message = message


class InvalidInputError(ClientError, ValueError):
    pass


class MockMissError(ClientError):
    """Scripted chat mock has no reply for a prompt."""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.messages:
            raise InvalidInputError("chat request needs at least one message")
        for role, _ in self.messages:
            if role not in ROLES:
                raise InvalidInputError(f"unknown role {role!r}")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise InvalidInputError("max_output_tokens must be >= 1")

    @classmethod
    def user(cls, prompt: str, **kwargs) -> ChatRequest:
        return cls(messages=(("user", prompt),), **kwargs)

    @property
    def prompt_text(self) -> str:
        return "\n\n".join(content for _, content in self.messages)


class ChatClient(Protocol):
    def chat(self, request: ChatRequest) -> str: ...


class EmbedClient(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def ask(chat: ChatClient, prompt: str, **kwargs) -> str:
    """Send a single user message."""
    return chat.chat(ChatRequest.user(prompt, **kwargs))


def check_embed_batch(texts: Sequence[str], max_batch: int | None = None) -> None:
    for i, text in enumerate(texts):
        if not isinstance(text, str) or not text.strip():
            raise InvalidInputError(f"empty text at index {i}")
    if max_batch is not None and len(texts) > max_batch:
        raise InvalidInputError(f"batch of {len(texts)} exceeds max batch size {max_batch}")


class _Gauge:
    """Concurrency cap plus in-flight counters shared by all clients."""

    def __init__(self, max_concurrency: int) -> None:
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self.max_concurrency = max_concurrency
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0

    def __enter__(self) -> None:
        self._sem.acquire()
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def __exit__(self, *exc) -> None:
        with self._lock:
            self.in_flight -= 1
        self._sem.release()


# -- HTTP -----------------------------------------------------------------


@dataclass
class ClientConfig:
    chat_base_url: str = "http://localhost:8000/v1"
    chat_model: str = "gpt-4o"
    embed_base_url: str = "http://localhost:8000/v1"
    embed_model: str = "text-embedding-3-small"
    api_key_env_var: str = "OPENAI_API_KEY"
    max_concurrency: int = 8
    max_retries: int = 3
    request_timeout_seconds: float = 60.0
    backoff_seconds: float = 0.5
    embed_batch_size: int = 128


_RETRY_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


class _HTTPBase:
    def __init__(
        self,
        config: ClientConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._gauge = _Gauge(config.max_concurrency)
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(config.api_key_env_var)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._http = httpx.Client(
            headers=headers, timeout=config.request_timeout_seconds, transport=transport
        )

    @property
    def calls(self) -> int:
        return self._gauge.calls

    @property
    def max_in_flight(self) -> int:
        return self._gauge.max_in_flight

    def _post(self, url: str, payload: dict) -> dict:
        attempts = self.config.max_retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.config.backoff_seconds * 2 ** (attempt - 1))
            try:
                with self._gauge:
                    resp = self._http.post(url, json=payload)
            except httpx.TransportError as exc:
                last = exc
                log.warning("transport failure on %s (attempt %d/%d): %s", url, attempt + 1, attempts, exc)
                continue
            if resp.status_code in _RETRY_STATUSES and attempt + 1 < attempts:
                log.warning("retryable status %d from %s", resp.status_code, url)
                last = ServiceError(resp.status_code, _error_message(resp))
                continue
            if not resp.is_success:
                raise ServiceError(resp.status_code, _error_message(resp))
            try:
                return resp.json()
            except ValueError as exc:
                raise ServiceError(resp.status_code, f"unparseable response body: {exc}") from exc
        if isinstance(last, ServiceError):
            raise last
        raise TransportError(f"{url}: retries exhausted after {attempts} attempts: {last}")

    def close(self) -> None:
        self._http.close()


def _error_message(resp: httpx.Response) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text[:500]
    if isinstance(body, dict):
        err = body.get("error", body)
        if isinstance(err, dict):
            return str(err.get("message", err))
        return str(err)
    return str(body)


class HTTPChatClient(_HTTPBase):
    """Chat-completions endpoint (``POST {base}/chat/completions``)."""

    def chat(self, request: ChatRequest) -> str:
        payload = {
            "model": self.config.chat_model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        body = self._post(self.config.chat_base_url.rstrip("/") + "/chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(200, f"malformed completion body: {exc}") from exc


class HTTPEmbedClient(_HTTPBase):
    """Embeddings endpoint (``POST {base}/embeddings``)."""

    dim = 0  # learned from the first response

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        check_embed_batch(texts)
        out: list[np.ndarray] = []
        url = self.config.embed_base_url.rstrip("/") + "/embeddings"
        size = self.config.embed_batch_size
        for start in range(0, len(texts), size):
            batch = list(texts[start : start + size])
            body = self._post(url, {"model": self.config.embed_model, "input": batch})
            try:
                rows = sorted(body["data"], key=lambda d: d["index"])
                vecs = [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
            except (KeyError, TypeError) as exc:
                raise ServiceError(200, f"malformed embedding body: {exc}") from exc
            if len(vecs) != len(batch):
                raise ServiceError(200, f"expected {len(batch)} embeddings, got {len(vecs)}")
            for v in vecs:
                if not self.dim:
                    self.dim = int(v.shape[0])
                if v.shape != (self.dim,) or not np.all(np.isfinite(v)):
                    raise ServiceError(200, "embedding has wrong dimension or non-finite values")
            out.extend(vecs)
        return out


# -- mocks ----------------------------------------------------------------


class HashingEmbedder:
    """Hashed bag-of-words embedder.

    Each case-folded word is hashed to one of ``dim`` coordinates, counts are
    accumulated and the vector is L2-normalized. Texts without word tokens map
    to the zero vector.
    """

    def __init__(self, dim: int = 256, max_batch: int | None = None, max_concurrency: int = 8) -> None:
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.max_batch = max_batch
        self._gauge = _Gauge(max_concurrency)
        self.texts_embedded = 0

    @property
    def calls(self) -> int:
        return self._gauge.calls

    def coordinate(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        check_embed_batch(texts, self.max_batch)
        if not texts:
            return []
        with self._gauge:
            out = []
            for text in texts:
                vec = np.zeros(self.dim, dtype=np.float64)
                for tok in words(text):
                    vec[self.coordinate(tok)] += 1.0
                norm = np.linalg.norm(vec)
                out.append(vec / norm if norm else vec)
            self.texts_embedded += len(texts)
            return out


Reply = str | Callable[[str], str]


@dataclass
class _Rule:
    pattern: re.Pattern[str]
    reply: Reply


class MockChatClient:
    """Scripted chat model.

    Lookup order for a prompt: exact fingerprint in ``replies``, then the first
    rule whose regex matches the prompt text, then ``default``. With
    ``default="hash"`` an unmatched prompt gets a reply derived from
    ``(seed, prompt)``; with ``default=None`` it raises :class:`MockMissError`.
    """

    def __init__(
        self,
        replies: dict[str, str] | None = None,
        rules: Sequence[tuple[str, Reply]] = (),
        default: str | None = None,
        seed: int = 0,
        max_concurrency: int = 8,
        latency: float = 0.0,
    ) -> None:
        self.replies = dict(replies or {})
        self.rules = [_Rule(re.compile(p, re.DOTALL), r) for p, r in rules]
        self.default = default
        self.seed = seed
        self.latency = latency
        self._gauge = _Gauge(max_concurrency)
        self.prompts: list[str] = []
        self._lock = threading.Lock()

    @staticmethod
    def fingerprint(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    @property
    def calls(self) -> int:
        return self._gauge.calls

    @property
    def max_in_flight(self) -> int:
        return self._gauge.max_in_flight

    def add_rule(self, pattern: str, reply: Reply) -> None:
        self.rules.append(_Rule(re.compile(pattern, re.DOTALL), reply))

    def chat(self, request: ChatRequest) -> str:
        prompt = request.prompt_text
        with self._gauge:
            with self._lock:
                self.prompts.append(prompt)
            if self.latency:
                time.sleep(self.latency)
            return self._lookup(prompt)

    def _lookup(self, prompt: str) -> str:
        fp = self.fingerprint(prompt)
        if fp in self.replies:
            return self.replies[fp]
        for rule in self.rules:
            if rule.pattern.search(prompt):
                return rule.reply(prompt) if callable(rule.reply) else rule.reply
        if self.default == "hash":
            return "mock-" + hashlib.sha256(f"{self.seed}\x1f{prompt}".encode()).hexdigest()[:12]
        if self.default is not None:
            return self.default
        raise MockMissError(f"no scripted reply for prompt {fp[:12]}: {prompt[:120]!r}")

    @classmethod
    def from_fixture(cls, path: str | Path, **kwargs) -> MockChatClient:
        """Load ``{"replies": {fingerprint: text}, "rules": [{"pattern", "reply"}], "default", "seed"}``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [(r["pattern"], _fixture_reply(r["reply"])) for r in data.get("rules", [])]
        return cls(
            replies=data.get("replies"),
            rules=rules,
            default=data.get("default"),
            seed=data.get("seed", 0),
            **kwargs,
        )


def _fixture_reply(reply: str | dict | list) -> str:
    # Fixture files may hold structured replies; they are sent as compact JSON text.
    if isinstance(reply, str):
        return reply
    return json.dumps(reply, ensure_ascii=False)


@dataclass
class FailingChat:
    """Chat client that always raises; for degradation tests."""

    error: Exception = field(default_factory=lambda: TransportError("simulated outage"))
    calls: int = 0

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        raise self.error
