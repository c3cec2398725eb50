"""JSON-over-HTTP POST with bounded retries, shared by the remote backends."""

from __future__ import annotations

import logging
import time
from typing import Any, Callable

import httpx

logger = logging.getLogger(__name__)

# Statuses worth retrying; anything else 4xx/5xx fails immediately.
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})

DEFAULT_ATTEMPTS = 3
DEFAULT_BACKOFF = 0.5


class TransportError(Exception):
    """Request failed after every permitted attempt (or fatally on the first)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    *,
    headers: dict[str, str] | None = None,
    attempts: int = DEFAULT_ATTEMPTS,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """POST a JSON payload, retrying transient failures with exponential backoff.

    Sleeps backoff, 2*backoff, ... between attempts. Non-retryable HTTP
    statuses raise immediately; exhausting the attempts raises a
    TransportError carrying the last status seen (None for pure transport
    failures).
    """
    last_error = "no attempt made"
    last_status: int | None = None
    for attempt in range(1, attempts + 1):
        if attempt > 1:
            delay = backoff * 2 ** (attempt - 2)
            logger.warning(
                "retrying %s (attempt %d/%d) after %s; sleeping %.1fs",
                url, attempt, attempts, last_error, delay,
            )
            sleep(delay)
        try:
            response = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last_error, last_status = f"transport error: {exc}", None
            continue
        if response.status_code == 200:
            return response.json()
        last_error, last_status = f"HTTP {response.status_code}", response.status_code
        if response.status_code not in RETRYABLE_STATUSES:
            raise TransportError(
                f"POST {url} failed: {last_error}", status=last_status
            )
    raise TransportError(
        f"POST {url} failed after {attempts} attempts: {last_error}", status=last_status
    )
