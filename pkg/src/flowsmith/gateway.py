"""Chat-completion gateway.

Two interchangeable backends: an HTTP client for any OpenAI-compatible
endpoint, and a scripted backend that replays pre-authored transcripts for
deterministic offline runs. Both expose ``complete(messages) -> ChatResponse``
and share the same retry accounting, so everything downstream (orchestrator,
judges, synthesis stages) is backend-agnostic.
"""

from __future__ import annotations

import math
import os
import random
import threading
import time
from typing import Callable, Literal, Optional

import httpx
import yaml
from pydantic import BaseModel, Field, model_validator

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0


class GatewayError(Exception):
    """Base class for gateway failures."""


class AuthError(GatewayError):
    """Authentication/authorization rejected; never retried."""


class TransientGatewayError(GatewayError):
    """Retryable failure: HTTP 429/5xx, timeouts, transport errors."""


class RetriesExhaustedError(GatewayError):
    """All retry attempts failed; carries the last underlying cause."""

    def __init__(self, attempts: int, cause: Exception):
        super().__init__(f"gave up after {attempts} attempts: {cause}")
        self.attempts = attempts
        self.cause = cause


class TranscriptError(GatewayError):
    """Base class for scripted-backend failures."""


class TranscriptFormatError(TranscriptError):
    """Transcript document is malformed."""


class TranscriptExhaustedError(TranscriptError):
    """A completion was requested but no unconsumed entry remains."""


class TranscriptMismatchError(TranscriptError):
    """Unconsumed entries remain but none matches the request."""


class LlmProfile(BaseModel):
    """Connection and sampling parameters for one chat-completion backend."""

    model_config = {"frozen": True, "extra": "forbid"}

    provider: Literal["openai_compatible", "scripted"] = "openai_compatible"
    model_id: str = ""
    temperature: float = Field(default=1.0, ge=0.0, le=2.0)
    top_p: float = Field(default=1.0, gt=0.0, le=1.0)
    base_url: Optional[str] = None
    max_retries: int = Field(default=3, ge=0)
    timeout: float = Field(default=60.0, gt=0.0)

    @model_validator(mode="after")
    def _require_model_id(self) -> "LlmProfile":
        if self.provider == "openai_compatible" and not self.model_id:
            raise ValueError("model_id must be non-empty for openai_compatible profiles")
        return self


class ChatMessage(BaseModel):
    """One turn of a chat conversation."""

    model_config = {"frozen": True, "extra": "forbid"}

    role: Literal["system", "user", "assistant", "tool"]
    content: str

    @model_validator(mode="after")
    def _require_content(self) -> "ChatMessage":
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")
        return self


class ChatResponse(BaseModel):
    """Assistant reply plus usage accounting for one logical completion."""

    model_config = {"frozen": True, "extra": "forbid"}

    content: str
    prompt_tokens: int = Field(ge=0)
    completion_tokens: int = Field(ge=0)
    latency: float = Field(ge=0.0)
    attempts: int = Field(ge=1)
    tokens_estimated: bool = False


def estimate_tokens(text: str) -> int:
    """Character-count fallback when the backend reports no usage."""
    return math.ceil(len(text) / 4)


class TranscriptEntry(BaseModel):
    """One scripted reply: a matcher plus either a response or an error kind."""

    model_config = {"frozen": True, "extra": "forbid"}

    matcher: Literal["any", "contains"] = "any"
    text: Optional[str] = None
    response: Optional[str] = None
    error: Optional[Literal["transient", "auth"]] = None

    @model_validator(mode="after")
    def _check_shape(self) -> "TranscriptEntry":
        if self.matcher == "contains" and not self.text:
            raise ValueError("contains matcher requires non-empty text")
        if self.matcher == "any" and self.text is not None:
            raise ValueError("any matcher takes no text")
        if (self.response is None) == (self.error is None):
            raise ValueError("entry must set exactly one of response/error")
        return self

    def fires(self, request_text: str) -> bool:
        if self.matcher == "any":
            return True
        return self.text in request_text


class Transcript:
    """Ordered scripted replies consumed by a :class:`ScriptedGateway`.

    Matching rule: each request consumes the first unconsumed entry (in
    declaration order) whose matcher fires. ``any`` entries always fire, so
    among themselves they are consumed strictly in order; ``contains`` entries
    fire only when the concatenated request messages contain their text.
    """

    def __init__(self, entries: list[TranscriptEntry]):
        self.entries = list(entries)
        self._consumed = [False] * len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def cursor(self) -> int:
        """Number of consumed entries; never exceeds the transcript length."""
        return sum(self._consumed)

    def take(self, request_text: str) -> TranscriptEntry:
        remaining = False
        for i, entry in enumerate(self.entries):
            if self._consumed[i]:
                continue
            remaining = True
            if entry.fires(request_text):
                self._consumed[i] = True
                return entry
        if remaining:
            raise TranscriptMismatchError(
                "no unconsumed transcript entry matches the request"
            )
        raise TranscriptExhaustedError(
            f"transcript exhausted after {len(self.entries)} entries"
        )


def load_transcript(text: str) -> Transcript:
    """Parse a transcript document (YAML; JSON is accepted as a subset).

    The document is either a top-level list of entries or a mapping with an
    ``entries`` key. Raises :class:`TranscriptFormatError` on malformed
    entries or unknown matcher kinds.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TranscriptFormatError(f"transcript is not valid YAML: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("entries")
    if doc is None:
        doc = []
    if not isinstance(doc, list):
        raise TranscriptFormatError("transcript document must be a list of entries")
    entries = []
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict):
            raise TranscriptFormatError(f"entry {i} is not a mapping")
        try:
            entries.append(TranscriptEntry.model_validate(raw))
        except ValueError as exc:
            raise TranscriptFormatError(f"entry {i} is malformed: {exc}") from exc
    return Transcript(entries)


def load_transcript_file(path: str) -> Transcript:
    with open(path, encoding="utf-8") as fh:
        return load_transcript(fh.read())


def _join_request(messages: list[ChatMessage]) -> str:
    return "\n".join(m.content for m in messages)


def _check_preconditions(messages: list[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role not in ("system", "user"):
        raise ValueError("first message must have role system or user")


class ScriptedGateway:
    """Deterministic gateway replaying a :class:`Transcript`.

    Cursor advancement is serialized internally, so concurrent callers observe
    a total order over entries. ``error: transient`` entries consume one
    attempt each and are retried (without sleeping) up to ``max_retries``.
    """

    def __init__(self, transcript: Transcript, max_retries: int = 3):
        self.transcript = transcript
        self.max_retries = max_retries
        self._lock = threading.Lock()

    @property
    def is_scripted(self) -> bool:
        return True

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        _check_preconditions(messages)
        request_text = _join_request(messages)
        with self._lock:
            last: Exception | None = None
            for attempt in range(1, self.max_retries + 2):
                entry = self.transcript.take(request_text)
                if entry.error == "auth":
                    raise AuthError("scripted auth failure")
                if entry.error == "transient":
                    last = TransientGatewayError("scripted transient failure")
                    continue
                return ChatResponse(
                    content=entry.response,
                    prompt_tokens=estimate_tokens(request_text),
                    completion_tokens=estimate_tokens(entry.response),
                    latency=0.0,
                    attempts=attempt,
                    tokens_estimated=True,
                )
            raise RetriesExhaustedError(self.max_retries + 1, last)


class HttpGateway:
    """OpenAI-compatible chat-completions client.

    POSTs ``{base_url}/chat/completions`` with ``{model, messages,
    temperature, top_p}``. Transient failures (HTTP 429/5xx, timeouts) are
    retried with exponential backoff and full jitter: sleep is uniform in
    ``[0, base * factor**i]``, base 1 s, factor 2. Auth failures (401/403) are
    never retried. ``LLM_API_KEY`` supplies the bearer token and
    ``LLM_BASE_URL`` overrides the profile base_url.
    """

    def __init__(
        self,
        profile: LlmProfile,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ):
        if profile.provider != "openai_compatible":
            raise ValueError("HttpGateway requires an openai_compatible profile")
        self.profile = profile
        self._sleep = sleep
        self._rng = rng or random.Random()

    @property
    def is_scripted(self) -> bool:
        return False

    def _base_url(self) -> str:
        url = os.environ.get("LLM_BASE_URL") or self.profile.base_url
        if not url:
            raise GatewayError("no base_url configured (profile or LLM_BASE_URL)")
        return url.rstrip("/")

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get("LLM_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _attempt(self, body: dict) -> ChatResponse:
        url = f"{self._base_url()}/chat/completions"
        try:
            resp = httpx.post(
                url, json=body, headers=self._headers(), timeout=self.profile.timeout
            )
        except httpx.TimeoutException as exc:
            raise TransientGatewayError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientGatewayError(f"transport error: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientGatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            content = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        estimated = "prompt_tokens" not in usage or "completion_tokens" not in usage
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        if prompt_tokens is None:
            prompt_tokens = estimate_tokens(_join_request_body(body))
        if completion_tokens is None:
            completion_tokens = estimate_tokens(content)
        return ChatResponse(
            content=content,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency=0.0,
            attempts=1,
            tokens_estimated=estimated,
        )

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        _check_preconditions(messages)
        body = {
            "model": self.profile.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": self.profile.temperature,
            "top_p": self.profile.top_p,
        }
        start = time.perf_counter()
        last: Exception | None = None
        for attempt in range(1, self.profile.max_retries + 2):
            try:
                response = self._attempt(body)
            except TransientGatewayError as exc:
                last = exc
                if attempt == self.profile.max_retries + 1:
                    raise RetriesExhaustedError(attempt, exc) from exc
                self._sleep(
                    self._rng.uniform(
                        0.0, BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (attempt - 1)
                    )
                )
                continue
            return response.model_copy(
                update={
                    "attempts": attempt,
                    "latency": time.perf_counter() - start,
                }
            )
        raise RetriesExhaustedError(self.profile.max_retries + 1, last)


def _join_request_body(body: dict) -> str:
    return "\n".join(m["content"] for m in body.get("messages", []))


def build_gateway(
    profile: LlmProfile, transcript: Optional[Transcript] = None
) -> ScriptedGateway | HttpGateway:
    """Construct the backend matching ``profile.provider``.

    A transcript forces the scripted backend regardless of provider, which is
    how replay mode swaps a live endpoint for a recording.
    """
    if transcript is not None:
        return ScriptedGateway(transcript, max_retries=profile.max_retries)
    if profile.provider == "scripted":
        raise GatewayError("scripted profile requires a transcript")
    return HttpGateway(profile)


def complete(
    profile: LlmProfile,
    messages: list[ChatMessage],
    transcript: Optional[Transcript] = None,
) -> ChatResponse:
    """One-shot completion against whichever backend the profile selects."""
    return build_gateway(profile, transcript).complete(messages)
