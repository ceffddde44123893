"""Chat-completion backends: remote HTTP services and deterministic doubles.

All backends expose the same async complete() and are safe to call from many
tasks at once; each instance enforces its own in-flight cap.  Usage is always
measured locally with the engine's tokenizer so accounting does not depend on
what a remote service chooses to report.

The mock backend is a pure function of (seed, agent binding, rendered
prompt).  It is shape-aware: prompts that demand a JSON suggestion object get
valid JSON, judge prompts get a verdict line, and an early-stopping synthesis
prompt whose query carries a "[stop@k]" marker gets the stop sentinel once
the prompt enumerates exactly k rounds.  That last rule lets tests script a
stop at a chosen layer without any mutable state in the backend.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import random
import re
import weakref
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Sequence

import httpx

from .accounting import TokenizerSpec, count_tokens, resolve_tokenizer
from .model import GenParams, ModelError, canonical_json

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A logical call failed for good."""


class TransportError(BackendError):
    """Network-level failure; retryable."""


class RemoteStatusError(BackendError):
    """Remote service answered with an error status."""

    def __init__(self, status: int, detail: str = "") -> None:
        super().__init__(f"remote returned status {status}" + (f": {detail}" if detail else ""))
        self.status = status

    @property
    def retryable(self) -> bool:
        return self.status == 429 or 500 <= self.status <= 599


class EmptyCompletionError(BackendError):
    """Remote returned zero-length text; retryable."""


class MalformedResponseError(BackendError):
    """Response body did not match the wire protocol."""


class ReplayMissError(BackendError):
    """Replay fixture has no (remaining) entry for this request."""


class BackendKind(str, Enum):
    HTTP_OPENAI_COMPATIBLE = "http_openai_compatible"
    MOCK = "mock"
    REPLAY = "replay"


@dataclass(frozen=True, slots=True)
class ChatRequest:
    """One prompt bound to the agent issuing it."""

    agent_id: str
    model: str
    messages: tuple[tuple[str, str], ...]
    system: str | None = None
    params: GenParams = GenParams()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple((r, t) for r, t in self.messages))
        if not self.messages:
            raise ModelError("request needs at least one message")
        if self.messages[-1][0] != "user":
            raise ModelError("last message must have role 'user'")

    def canonical_text(self) -> str:
        """Single-string form used for token counting and prefix caching.

        With one message this is system + blank line + the message text, the
        same string the engine feeds its cache model.
        """
        if len(self.messages) == 1:
            user = self.messages[0][1]
        else:
            user = "\n".join(f"{role}: {text}" for role, text in self.messages)
        return (self.system + "\n\n" + user) if self.system else user


@dataclass(frozen=True, slots=True)
class ChatResult:
    """Completion text plus both views of its cost."""

    text: str
    measured_usage: tuple[int, int]
    reported_usage: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.measured_usage[0] < 0 or self.measured_usage[1] < 0:
            raise ModelError("measured usage must be non-negative")


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    """Up to `retries` extra attempts on transient failures, with backoff."""

    timeout: float = 120.0
    retries: int = 2
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int) -> float:
        base = min(self.base_delay * (2**attempt), self.max_delay)
        return base * (1.0 + random.random())


@dataclass
class RetryDiagnostics:
    """Cost of attempts that did not become ledger entries."""

    failed_attempts: int = 0
    failed_prompt_tokens: int = 0


def request_key(request: ChatRequest) -> str:
    """Stable digest identifying a request for record/replay matching.

    Sampling parameters are excluded on purpose: a fixture recorded at one
    temperature replays against configs that only changed temperatures.
    """
    doc = {
        "agent_id": request.agent_id,
        "system": request.system,
        "messages": [list(m) for m in request.messages],
    }
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


class Backend(ABC):
    """Shared retry, capping, and measurement for every backend kind."""

    kind: BackendKind

    def __init__(
        self,
        name: str,
        tokenizer: str | TokenizerSpec = "approx_chars",
        max_in_flight: int = 8,
        retry: RetryPolicy = RetryPolicy(),
    ) -> None:
        if max_in_flight < 1:
            raise ModelError(f"max_in_flight must be >= 1, got {max_in_flight}")
        self.name = name
        self.tokenizer = tokenizer if isinstance(tokenizer, TokenizerSpec) else resolve_tokenizer(tokenizer)
        self.max_in_flight = max_in_flight
        self.retry = retry
        self.diagnostics = RetryDiagnostics()
        # asyncio primitives bind to the loop that first awaits them, so one
        # backend used across several asyncio.run calls needs one semaphore
        # per loop.
        self._sems: weakref.WeakKeyDictionary[Any, asyncio.Semaphore] = weakref.WeakKeyDictionary()

    def _sem(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        sem = self._sems.get(loop)
        if sem is None:
            sem = asyncio.Semaphore(self.max_in_flight)
            self._sems[loop] = sem
        return sem

    @abstractmethod
    async def _attempt(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        """Issue the request once; return (text, reported usage)."""

    async def complete(self, request: ChatRequest) -> ChatResult:
        """Issue a logical call: capped, retried, measured.

        However many attempts it takes, the caller sees exactly one result
        and accounts for exactly one call; failed attempts only move the
        diagnostics counters.
        """
        prompt_tokens = count_tokens(request.canonical_text(), self.tokenizer)
        async with self._sem():
            attempt = 0
            while True:
                try:
                    text, reported = await self._attempt(request)
                    if not text:
                        raise EmptyCompletionError(f"backend {self.name}: empty completion")
                except (TransportError, EmptyCompletionError, RemoteStatusError) as exc:
                    if isinstance(exc, RemoteStatusError) and not exc.retryable:
                        raise
                    self.diagnostics.failed_attempts += 1
                    self.diagnostics.failed_prompt_tokens += prompt_tokens
                    if attempt >= self.retry.retries:
                        raise
                    delay = self.retry.delay(attempt)
                    log.warning("backend %s attempt %d failed (%s), retrying in %.2fs", self.name, attempt + 1, exc, delay)
                    await asyncio.sleep(delay)
                    attempt += 1
                    continue
                return ChatResult(
                    text=text,
                    measured_usage=(prompt_tokens, count_tokens(text, self.tokenizer)),
                    reported_usage=reported,
                )


async def complete(backend: Backend, request: ChatRequest) -> ChatResult:
    """Function form of Backend.complete for callers holding a bare binding."""
    return await backend.complete(request)


# ---------------------------------------------------------------------------
# Deterministic mock generation


_VOCAB = (
    "the", "a", "this", "that", "one", "each", "model", "answer", "query", "layer",
    "round", "result", "reason", "detail", "method", "step", "point", "claim", "source", "term",
    "value", "count", "order", "scope", "case", "path", "rule", "note", "draft", "check",
    "refine", "improve", "compare", "combine", "review", "extend", "support", "clarify", "verify", "adjust",
    "clear", "exact", "sound", "brief", "broad", "plain", "fair", "full", "open", "firm",
    "shows", "holds", "gives", "keeps", "needs", "lacks", "adds", "cites", "covers", "links",
    "however", "therefore", "overall", "first",
)

_SENTENCE_LEN = 12


@dataclass(frozen=True, slots=True)
class LengthModel:
    """Completion length in words, roughly normal around the mean.

    The draw sums twelve uniform words of the digest stream, which is close
    enough to Gaussian for cost modeling and needs no platform-dependent
    math functions.
    """

    mean: float = 300.0
    std: float = 60.0

    def draw(self, stream: Iterator[int]) -> int:
        z = sum(next(stream) / 65536.0 for _ in range(12)) - 6.0
        return max(4, int(round(self.mean + self.std * z)))


def _digest_stream(seed: int, agent_id: str, prompt: str) -> Iterator[int]:
    """Endless uint16 stream keyed by the call identity."""
    state = hashlib.sha256(f"{seed}\x1f{agent_id}\x1f{prompt}".encode("utf-8")).digest()
    counter = 0
    while True:
        block = hashlib.sha256(state + counter.to_bytes(8, "big")).digest()
        for i in range(0, len(block), 2):
            yield int.from_bytes(block[i : i + 2], "big")
        counter += 1


def _prose(stream: Iterator[int], n_words: int) -> str:
    words = [_VOCAB[next(stream) % len(_VOCAB)] for _ in range(n_words)]
    sentences = []
    for i in range(0, len(words), _SENTENCE_LEN):
        chunk = words[i : i + _SENTENCE_LEN]
        sentences.append(" ".join(chunk).capitalize() + ".")
    return " ".join(sentences)


def mock_complete(seed: int, agent_id: str, rendered_prompt: str, length: LengthModel = LengthModel()) -> str:
    """Pure deterministic completion for (seed, agent binding, prompt)."""
    stream = _digest_stream(seed, agent_id, rendered_prompt)
    return _prose(stream, length.draw(stream))


_STOP_SENTINEL_TEXT = "**Attention-MoA should be stopped**"
_STOP_CLAUSE_MARK = "you should output **Attention-MoA should be stopped** only."
_STOP_AT_RE = re.compile(r"\[stop@([0-9]+)\]")
_ROUND_BLOCK_RE = re.compile(r"^Response of historical round [0-9]+:$", re.MULTILINE)
_SCHEMA_KEY_RE = re.compile(r'"(suggestion_for_model_[0-9]+)": "your suggestions')
_JUDGE_MARK = "[[A]] if Response A is better"


def shaped_mock_complete(seed: int, agent_id: str, rendered_prompt: str, length: LengthModel = LengthModel()) -> str:
    """mock_complete plus recognition of prompts that demand structure.

    Still a pure function; the shape is read off the prompt text itself.
    """
    stop_at = _STOP_AT_RE.search(rendered_prompt)
    if stop_at is not None and _STOP_CLAUSE_MARK in rendered_prompt:
        rounds = len(_ROUND_BLOCK_RE.findall(rendered_prompt))
        if rounds == int(stop_at.group(1)):
            return _STOP_SENTINEL_TEXT
    keys = _SCHEMA_KEY_RE.findall(rendered_prompt)
    if keys and "The output should be a JSON object as:" in rendered_prompt:
        stream = _digest_stream(seed, agent_id, rendered_prompt)
        per_key = max(4, length.draw(stream) // len(keys))
        return json.dumps({key: _prose(stream, per_key) for key in keys}, ensure_ascii=False)
    if _JUDGE_MARK in rendered_prompt:
        stream = _digest_stream(seed, agent_id, rendered_prompt)
        verdict = ("[[A]]", "[[B]]", "[[C]]")[next(stream) % 3]
        return _prose(stream, _SENTENCE_LEN) + "\nFinal verdict: " + verdict
    return mock_complete(seed, agent_id, rendered_prompt, length)


class MockBackend(Backend):
    """In-process deterministic backend; never fails, never sleeps."""

    kind = BackendKind.MOCK

    def __init__(
        self,
        name: str,
        seed: int = 0,
        length: LengthModel = LengthModel(),
        tokenizer: str | TokenizerSpec = "approx_chars",
        max_in_flight: int = 8,
        retry: RetryPolicy = RetryPolicy(),
    ) -> None:
        super().__init__(name, tokenizer=tokenizer, max_in_flight=max_in_flight, retry=retry)
        self.seed = seed
        self.length = length

    async def _attempt(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        return shaped_mock_complete(self.seed, request.agent_id, request.canonical_text(), self.length), None


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client.

    Auth is a bearer token read from the environment variable named by
    auth_env; unset means anonymous, which is what the in-repo conformance
    server expects.
    """

    kind = BackendKind.HTTP_OPENAI_COMPATIBLE

    def __init__(
        self,
        name: str,
        base_url: str,
        auth_env: str | None = None,
        tokenizer: str | TokenizerSpec = "approx_chars",
        max_in_flight: int = 8,
        retry: RetryPolicy = RetryPolicy(),
    ) -> None:
        super().__init__(name, tokenizer=tokenizer, max_in_flight=max_in_flight, retry=retry)
        parsed = httpx.URL(base_url)
        if parsed.scheme not in ("http", "https") or not parsed.host:
            raise ModelError(f"invalid base_url: {base_url!r}")
        self.base_url = base_url.rstrip("/")
        self.auth_env = auth_env

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    async def _attempt(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        messages = []
        if request.system is not None:
            messages.append({"role": "system", "content": request.system})
        messages.extend({"role": role, "content": text} for role, text in request.messages)
        body = {
            "model": request.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }
        try:
            async with httpx.AsyncClient(timeout=self.retry.timeout) as client:
                response = await client.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"backend {self.name}: {exc}") from exc
        if response.status_code != 200:
            raise RemoteStatusError(response.status_code, response.text[:200])
        try:
            doc = response.json()
            text = doc["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise MalformedResponseError(f"backend {self.name}: bad response body: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedResponseError(f"backend {self.name}: completion content is not text")
        usage = doc.get("usage") or {}
        reported = None
        if isinstance(usage.get("prompt_tokens"), int) and isinstance(usage.get("completion_tokens"), int):
            reported = (usage["prompt_tokens"], usage["completion_tokens"])
        return text, reported


class ReplayBackend(Backend):
    """Serves recorded results; repeated identical requests pop in order."""

    kind = BackendKind.REPLAY

    def __init__(
        self,
        name: str,
        fixture: str | Path | Sequence[dict],
        tokenizer: str | TokenizerSpec = "approx_chars",
        max_in_flight: int = 8,
        retry: RetryPolicy = RetryPolicy(),
    ) -> None:
        super().__init__(name, tokenizer=tokenizer, max_in_flight=max_in_flight, retry=retry)
        if isinstance(fixture, (str, Path)):
            entries = json.loads(Path(fixture).read_text(encoding="utf-8"))
        else:
            entries = list(fixture)
        self._queues: dict[str, list[dict]] = {}
        for entry in entries:
            self._queues.setdefault(entry["key_digest"], []).append(entry)

    async def _attempt(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        key = request_key(request)
        queue = self._queues.get(key)
        if not queue:
            raise ReplayMissError(f"backend {self.name}: no recorded result for request key {key[:12]}")
        entry = queue.pop(0)
        result = entry["result"]
        reported = result.get("reported_usage")
        return result["text"], tuple(reported) if reported else None


class RecordingBackend(Backend):
    """Wraps another backend and captures every result as a fixture entry.

    Retries, capping, and measurement stay with the inner backend; this class
    only observes logical results, so one logical call yields one entry.
    """

    def __init__(self, inner: Backend) -> None:
        super().__init__(inner.name, tokenizer=inner.tokenizer, max_in_flight=inner.max_in_flight, retry=inner.retry)
        self.kind = inner.kind
        self.inner = inner
        self.entries: list[dict] = []

    async def complete(self, request: ChatRequest) -> ChatResult:
        result = await self.inner.complete(request)
        self.entries.append(
            {
                "key_digest": request_key(request),
                "request": {
                    "agent_id": request.agent_id,
                    "model": request.model,
                    "system": request.system,
                    "messages": [list(m) for m in request.messages],
                    "temperature": request.params.temperature,
                    "max_tokens": request.params.max_tokens,
                },
                "result": {
                    "text": result.text,
                    "reported_usage": list(result.reported_usage) if result.reported_usage else None,
                },
            }
        )
        return result

    async def _attempt(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        raise AssertionError("RecordingBackend.complete delegates to the inner backend")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(canonical_json(self.entries), encoding="utf-8")


async def record(backend: Backend, request: ChatRequest) -> tuple[ChatResult, dict]:
    """One-shot record helper: complete via a wrapper and return the entry."""
    recorder = RecordingBackend(backend)
    result = await recorder.complete(request)
    return result, recorder.entries[0]
