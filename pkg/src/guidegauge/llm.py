"""Chat-completion backends used by every agent stage.

The remote backend speaks the common chat-completions wire protocol and
retries transient failures. The mock backend replays a scripted
transcript strictly in order, which makes whole pipeline runs
reproducible bit for bit; any divergence between the run and the script
(wrong stage tag, script exhausted) is an error, never a silent skip.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx

from ._http import DEFAULT_ATTEMPTS, DEFAULT_BACKOFF, post_json

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

ENV_API_KEY = "GG_API_KEY"
ENV_BASE_URL = "GG_BASE_URL"

DEFAULT_MAX_TOKENS = 1024
DEFAULT_MAX_IN_FLIGHT = 4


class LlmError(Exception):
    """Base for chat backend failures."""


class TranscriptError(LlmError):
    """The mock transcript and the actual run diverged."""


class StructuredOutputError(LlmError):
    """Model output did not contain usable structured data."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role in ("system", "user") and not self.content.strip():
            raise ValueError(f"{self.role} message must not be empty")


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage("assistant", content)


@dataclass(frozen=True)
class LlmRequest:
    """One completion call; `tag` names the agent stage for logs and mock routing."""

    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    tag: str = ""

    def __post_init__(self) -> None:
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("request needs at least one user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


class MockChatBackend:
    """Replays (tag, response) pairs in order. Not safe for concurrent use."""

    def __init__(self, entries: list[tuple[str, str]]):
        self._entries = list(entries)
        self._cursor = 0

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "MockChatBackend":
        """Load a transcript: one {"tag": ..., "response": ...} object per line."""
        entries = []
        with Path(path).open("r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    entries.append((record["tag"], record["response"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise TranscriptError(
                        f"transcript line {line_number} is not a tag/response object: {exc}"
                    ) from exc
        return cls(entries)

    @property
    def remaining(self) -> int:
        return len(self._entries) - self._cursor

    def complete(self, request: LlmRequest) -> str:
        if self._cursor >= len(self._entries):
            raise TranscriptError(
                f"transcript exhausted: no scripted response for tag {request.tag!r}"
            )
        tag, response = self._entries[self._cursor]
        if tag != request.tag:
            raise TranscriptError(
                f"transcript mismatch: expected tag {tag!r}, request was {request.tag!r}"
            )
        self._cursor += 1
        return response


class RemoteChatBackend:
    """Chat-completions client with retries and a global in-flight cap."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        *,
        attempts: int = DEFAULT_ATTEMPTS,
        backoff: float = DEFAULT_BACKOFF,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        base_url = base_url or os.environ.get(ENV_BASE_URL, "")
        if not base_url:
            raise LlmError(f"remote chat backend needs a base URL (config or ${ENV_BASE_URL})")
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.attempts = attempts
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: LlmRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {}
        api_key = os.environ.get(ENV_API_KEY)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        with self._slots:
            data = post_json(
                self._client,
                f"{self.base_url}/chat/completions",
                payload,
                headers=headers,
                attempts=self.attempts,
                backoff=self.backoff,
            )
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"malformed chat response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


def complete(request: LlmRequest, backend) -> str:
    """Run one completion against whichever backend is configured."""
    logger.debug("completing request tag=%s", request.tag)
    return backend.complete(request)


def extract_json_block(text: str) -> Any:
    """Parse the first balanced top-level JSON object or array in `text`.

    Tolerates code fences and prose around the JSON. Raises
    StructuredOutputError when nothing parseable is found.
    """
    decoder = json.JSONDecoder()
    for position, char in enumerate(text):
        if char in "{[":
            try:
                value, _ = decoder.raw_decode(text, position)
                return value
            except json.JSONDecodeError:
                continue
    raise StructuredOutputError("no JSON object or array found in model output")
