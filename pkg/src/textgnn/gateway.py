"""Uniform access to chat-completion backends.

Two backend families share one call contract:

* ``HttpChatBackend`` speaks the common JSON chat-completion wire format
  (model, messages, max output tokens, temperature) over HTTPS, with the
  API key read from a named environment variable.
* ``MockBackend`` is a deterministic offline stand-in whose output is a pure
  function of the prompt, making every pipeline above it testable without
  network access or spend.

``Gateway`` wraps a backend with client-side rate limiting (token bucket),
bounded in-flight concurrency, exponential-backoff retries for transient
failures, per-attempt usage accounting, and optional budget caps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

logger = logging.getLogger(__name__)

MOCK_HEADER = "[mock-completion]"
_MARKER_RE = re.compile(r"⟦node:(.+?)⟧")
_SRC_RE = re.compile(r"SRC:([0-9a-f]{16})")


def node_marker(node_id: str) -> str:
    """Identity marker the mock backend recognizes in prompt content."""
    return f"⟦node:{node_id}⟧"


def node_digest(node_id: str) -> str:
    """Stable 16-hex-char digest the mock emits for a node id."""
    return hashlib.sha256(node_id.encode("utf-8")).hexdigest()[:16]


def extract_digests(text: str) -> List[str]:
    """All SRC digests present in a text, in first-occurrence order."""
    seen: List[str] = []
    for digest in _SRC_RE.findall(text):
        if digest not in seen:
            seen.append(digest)
    return seen


class GatewayError(Exception):
    """Base class for backend/gateway failures."""


class AuthenticationError(GatewayError):
    """Credentials rejected; never retried."""


class RateLimitedError(GatewayError):
    """Provider-side throttling; retryable."""


class BackendTimeoutError(GatewayError):
    """Request timed out; retryable."""


class TransientBackendError(GatewayError):
    """5xx-style provider hiccup; retryable."""


class ContextOverflowError(GatewayError):
    """Request exceeded the provider context window; permanent."""

    def __init__(self, message: str, request_tag: str = "") -> None:
        super().__init__(message)
        self.request_tag = request_tag


class BackendContractError(GatewayError):
    """The provider response violated the call contract (e.g. output cap)."""


class RetriesExhaustedError(GatewayError):
    """A retryable failure persisted past the attempt cap."""


class BudgetExceededError(GatewayError):
    """A configured call or token budget cap was reached."""


_RETRYABLE = (RateLimitedError, BackendTimeoutError, TransientBackendError)


@dataclass(frozen=True)
class CompletionRequest:
    instruction_text: str
    content_text: str
    model_id: str
    max_output_tokens: int = 1024
    temperature: float = 0.0
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.instruction_text:
            raise ValueError("instruction_text must be non-empty")
        if not self.content_text:
            raise ValueError("content_text must be non-empty")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    model_id: str
    latency_ms: int = 0
    from_cache: bool = False


def _word_count(text: str) -> int:
    return len(text.split())


class MockBackend:
    """Offline backend: output is a pure function of the prompt pair.

    The response is, in order: a fixed header line; one ``SRC:<digest>`` line
    per node source referenced by the content (both fresh ``⟦node:id⟧``
    markers, digested, and ``SRC:`` digests already embedded in the content,
    re-emitted), deduplicated in first-occurrence order; and a single body
    line holding the first sentence of the content truncated to 40 words.
    Re-emitting inherited digests is what lets provenance flow through
    multi-layer encoding so tests can assert exactly which nodes reached a
    representation.
    """

    supports_source_markers = True

    def __init__(self, model_id: str = "mock", max_context_chars: Optional[int] = None) -> None:
        self.model_id = model_id
        self.max_context_chars = max_context_chars

    def send(self, req: CompletionRequest) -> CompletionResponse:
        if self.max_context_chars is not None:
            total = len(req.instruction_text) + len(req.content_text)
            if total > self.max_context_chars:
                raise ContextOverflowError(
                    f"context overflow: {total} chars exceeds window of {self.max_context_chars}",
                    request_tag=req.request_tag,
                )
        digests: List[str] = []
        events = []
        for match in _MARKER_RE.finditer(req.content_text):
            events.append((match.start(), node_digest(match.group(1))))
        for match in _SRC_RE.finditer(req.content_text):
            events.append((match.start(), match.group(1)))
        for _, digest in sorted(events, key=lambda item: item[0]):
            if digest not in digests:
                digests.append(digest)

        body = _first_sentence(req.content_text)
        body_words = body.split()[:40]
        lines = [MOCK_HEADER]
        lines.extend(f"SRC:{d}" for d in digests)
        lines.append(" ".join(body_words))
        text = "\n".join(lines)
        return CompletionResponse(
            text=text,
            prompt_tokens=_word_count(req.instruction_text) + _word_count(req.content_text),
            completion_tokens=_word_count(text),
            model_id=self.model_id,
            latency_ms=0,
        )


def _first_sentence(text: str) -> str:
    match = re.search(r"[.!?]", text)
    return text[: match.end()] if match else text


class HttpChatBackend:
    """JSON chat-completion client (OpenAI-compatible wire format)."""

    supports_source_markers = False

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key_env: str,
        timeout_s: float = 60.0,
        extra_headers: Optional[Dict[str, str]] = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.extra_headers = dict(extra_headers or {})

    def _api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        return key

    def send(self, req: CompletionRequest) -> CompletionResponse:
        import requests

        payload = {
            "model": req.model_id or self.model_id,
            "messages": [
                {"role": "system", "content": req.instruction_text},
                {"role": "user", "content": req.content_text},
            ],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }
        headers = {"Authorization": f"Bearer {self._api_key()}", "Content-Type": "application/json"}
        headers.update(self.extra_headers)
        started = time.monotonic()
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.Timeout as exc:
            raise BackendTimeoutError(f"timeout after {self.timeout_s}s") from exc
        except requests.ConnectionError as exc:
            raise TransientBackendError(f"connection error: {exc}") from exc
        latency_ms = int((time.monotonic() - started) * 1000)

        if resp.status_code in (401, 403):
            raise AuthenticationError(f"authentication failed: HTTP {resp.status_code}")
        if resp.status_code == 429:
            raise RateLimitedError("provider rate limit (HTTP 429)")
        if resp.status_code >= 500:
            raise TransientBackendError(f"provider error: HTTP {resp.status_code}")
        if resp.status_code == 400 and "context" in resp.text.lower():
            raise ContextOverflowError("context overflow", request_tag=req.request_tag)
        if resp.status_code != 200:
            raise GatewayError(f"provider error: HTTP {resp.status_code}: {resp.text[:200]}")

        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendContractError(f"unexpected provider response shape: {exc}") from exc
        return CompletionResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            model_id=req.model_id or self.model_id,
            latency_ms=latency_ms,
        )


class TokenBucket:
    """Client-side requests-per-minute limiter; thread-safe."""

    def __init__(
        self,
        requests_per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.rate_per_s = requests_per_minute / 60.0
        self.capacity = max(1.0, requests_per_minute / 60.0)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate_per_s)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate_per_s
            self._sleep(wait)


@dataclass(frozen=True)
class AttemptRecord:
    request_tag: str
    model_id: str
    attempt: int
    status: str  # ok | retryable_error | permanent_error
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0


class UsageLedger:
    """Append-only record of every backend attempt; internally synchronized."""

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self._records: List[AttemptRecord] = []
        self._lock = threading.Lock()
        self._path = Path(path) if path else None

    def record(self, rec: AttemptRecord) -> None:
        with self._lock:
            self._records.append(rec)
            if self._path is not None:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")

    @property
    def records(self) -> List[AttemptRecord]:
        with self._lock:
            return list(self._records)

    def attempts(self, tag_prefix: str = "") -> int:
        return sum(1 for r in self.records if r.request_tag.startswith(tag_prefix))

    def calls_ok(self, tag_prefix: str = "") -> int:
        return sum(1 for r in self.records if r.status == "ok" and r.request_tag.startswith(tag_prefix))

    def total_tokens(self) -> int:
        return sum(r.prompt_tokens + r.completion_tokens for r in self.records)


@dataclass(frozen=True)
class UsageSummary:
    total_attempts: int
    total_calls: int
    total_prompt_tokens: int
    total_completion_tokens: int
    per_tag: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {
            "total_attempts": self.total_attempts,
            "total_calls": self.total_calls,
            "total_prompt_tokens": self.total_prompt_tokens,
            "total_completion_tokens": self.total_completion_tokens,
            "per_tag": self.per_tag,
        }


def usage_report(ledger: UsageLedger) -> UsageSummary:
    """Totals plus per-request_tag means over successful calls."""
    records = ledger.records
    ok = [r for r in records if r.status == "ok"]
    per_tag: Dict[str, Dict[str, float]] = {}
    by_tag: Dict[str, List[AttemptRecord]] = {}
    for rec in ok:
        by_tag.setdefault(rec.request_tag, []).append(rec)
    for tag, recs in sorted(by_tag.items()):
        n = len(recs)
        per_tag[tag] = {
            "calls": n,
            "mean_prompt_tokens": sum(r.prompt_tokens for r in recs) / n,
            "mean_completion_tokens": sum(r.completion_tokens for r in recs) / n,
        }
    return UsageSummary(
        total_attempts=len(records),
        total_calls=len(ok),
        total_prompt_tokens=sum(r.prompt_tokens for r in ok),
        total_completion_tokens=sum(r.completion_tokens for r in ok),
        per_tag=per_tag,
    )


class Gateway:
    """Backend wrapper adding retries, rate limiting, accounting, and budgets.

    Retries use exponential backoff (base 1s, factor 2, jittered) up to
    ``max_attempts``; only transient failures are retried. At most
    ``max_in_flight`` requests run concurrently. Budget caps, when set,
    raise BudgetExceededError before a call that would breach them.
    """

    def __init__(
        self,
        backend,
        ledger: Optional[UsageLedger] = None,
        requests_per_minute: Optional[float] = None,
        max_in_flight: int = 8,
        max_attempts: int = 5,
        backoff_base_s: float = 1.0,
        backoff_factor: float = 2.0,
        sleep: Callable[[float], None] = time.sleep,
        max_calls: Optional[int] = None,
        max_total_tokens: Optional[int] = None,
    ) -> None:
        self.backend = backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._bucket = TokenBucket(requests_per_minute, sleep=sleep) if requests_per_minute else None
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self.max_calls = max_calls
        self.max_total_tokens = max_total_tokens
        self._budget_lock = threading.Lock()
        self._calls_completed = 0

    @property
    def supports_source_markers(self) -> bool:
        return bool(getattr(self.backend, "supports_source_markers", False))

    @property
    def calls_completed(self) -> int:
        return self._calls_completed

    def _check_budget(self) -> None:
        with self._budget_lock:
            if self.max_calls is not None and self._calls_completed >= self.max_calls:
                raise BudgetExceededError(f"call budget of {self.max_calls} reached")
            if self.max_total_tokens is not None and self.ledger.total_tokens() >= self.max_total_tokens:
                raise BudgetExceededError(f"token budget of {self.max_total_tokens} reached")

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        self._check_budget()
        with self._slots:
            last_error: Optional[GatewayError] = None
            for attempt in range(1, self.max_attempts + 1):
                if self._bucket is not None:
                    self._bucket.acquire()
                try:
                    resp = self.backend.send(req)
                except _RETRYABLE as exc:
                    last_error = exc
                    self.ledger.record(
                        AttemptRecord(req.request_tag, req.model_id, attempt, "retryable_error")
                    )
                    if attempt < self.max_attempts:
                        delay = self.backoff_base_s * (self.backoff_factor ** (attempt - 1))
                        self._sleep(delay * (0.5 + random.random()))
                    continue
                except GatewayError:
                    self.ledger.record(
                        AttemptRecord(req.request_tag, req.model_id, attempt, "permanent_error")
                    )
                    raise
                if resp.completion_tokens > req.max_output_tokens:
                    self.ledger.record(
                        AttemptRecord(req.request_tag, req.model_id, attempt, "permanent_error")
                    )
                    raise BackendContractError(
                        f"response of {resp.completion_tokens} tokens exceeds the "
                        f"max_output_tokens cap of {req.max_output_tokens} (tag {req.request_tag!r})"
                    )
                self.ledger.record(
                    AttemptRecord(
                        req.request_tag,
                        req.model_id,
                        attempt,
                        "ok",
                        prompt_tokens=resp.prompt_tokens,
                        completion_tokens=resp.completion_tokens,
                        latency_ms=resp.latency_ms,
                    )
                )
                with self._budget_lock:
                    self._calls_completed += 1
                return resp
            raise RetriesExhaustedError(
                f"gave up after {self.max_attempts} attempts (tag {req.request_tag!r}): {last_error}"
            ) from last_error


def as_gateway(backend_or_gateway) -> Gateway:
    """Accept either a raw backend or a configured Gateway."""
    if isinstance(backend_or_gateway, Gateway):
        return backend_or_gateway
    return Gateway(backend_or_gateway)
