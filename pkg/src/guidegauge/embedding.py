"""Unit-vector embeddings for chunks and queries.

Two backends share one contract: every vector leaving this module is
float64, has the configured dimension, and is L2-normalized. The "hash"
backend is a deterministic signed bag-of-words embedder that needs no
network or model weights; the "remote" backend calls an embedding service
over HTTP. Vectors support nested-prefix truncation: the first d'
components renormalized are themselves a usable lower-dimensional
embedding.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import httpx
import numpy as np

from ._http import DEFAULT_ATTEMPTS, DEFAULT_BACKOFF, post_json
from .corpus import tokenize

# Keyed BLAKE2b pins the hashed feature space; changing the key invalidates
# every index built with the hash backend.
HASH_KEY = b"gg-embed-v1"

DEFAULT_FULL_DIM = 768
NORM_TOL = 1e-6

ENV_API_KEY = "GG_API_KEY"
ENV_BASE_URL = "GG_BASE_URL"

BACKENDS = ("hash", "remote")


class EmbeddingError(Exception):
    """Bad embedding input or a failed embedding call."""


class DimensionMismatchError(EmbeddingError):
    """The remote service returned vectors of the wrong dimension (config error)."""


@dataclass(frozen=True)
class EmbedderConfig:
    """Which backend produces vectors, at what dimensions.

    Vectors are produced at full_dim, then truncated to truncate_dim and
    renormalized. truncate_dim defaults to full_dim (no truncation).
    """

    backend: str = "hash"
    model_name: str = ""
    full_dim: int = DEFAULT_FULL_DIM
    truncate_dim: int | None = None
    base_url: str | None = None
    batch_size: int = 64
    max_in_flight: int = 4
    timeout: float = 30.0
    attempts: int = DEFAULT_ATTEMPTS
    backoff: float = DEFAULT_BACKOFF

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown embedding backend {self.backend!r}")
        if self.full_dim <= 0:
            raise ValueError("full_dim must be positive")
        if self.truncate_dim is not None and not 0 < self.truncate_dim <= self.full_dim:
            raise ValueError("truncate_dim must be in [1, full_dim]")
        if self.backend == "remote" and not self.model_name:
            raise ValueError("remote backend requires a model_name")

    @property
    def output_dim(self) -> int:
        return self.truncate_dim if self.truncate_dim is not None else self.full_dim

    def identity(self) -> str:
        """Stable string identifying the embedding space; stamped into indexes."""
        if self.backend == "hash":
            name = f"hashbow64[{HASH_KEY.decode()}]"
        else:
            name = f"remote[{self.model_name}]"
        return f"{name}:d{self.full_dim}t{self.output_dim}"


def normalize(vector: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm. Zero vectors cannot be normalized."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise EmbeddingError("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(vector)):
        raise EmbeddingError("vector has non-finite values")
    norm = float(np.sqrt(np.sum(vector * vector)))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return vector / norm


def truncate_matryoshka(vector: np.ndarray, d_prime: int) -> np.ndarray:
    """Keep the first d_prime components and renormalize."""
    vector = np.asarray(vector, dtype=np.float64)
    if d_prime <= 0 or d_prime > vector.size:
        raise EmbeddingError(
            f"truncation dim {d_prime} out of range for a {vector.size}-d vector"
        )
    prefix = vector[:d_prime]
    if not np.any(prefix):
        raise EmbeddingError("vector prefix is all zeros; cannot renormalize")
    return normalize(prefix)


def _token_hash(token: str) -> int:
    """Fixed 64-bit token hash (keyed BLAKE2b, little-endian digest)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=HASH_KEY).digest()
    return int.from_bytes(digest, "little")


def deterministic_embed(text: str, dim: int) -> np.ndarray:
    """Signed hashed bag-of-words embedding, unit-normalized.

    Each token's 64-bit hash selects a bucket (hash mod dim) and a sign
    (top hash bit: 0 is +1, 1 is -1); contributions accumulate in float64
    in token order, so byte-equal inputs give bit-equal vectors. Token
    order does not matter (bag of words), token multiplicity only scales
    the vector before normalization.
    """
    if dim <= 0:
        raise EmbeddingError("dim must be positive")
    tokens = tokenize(text)
    if not tokens:
        raise EmbeddingError("cannot embed empty text")
    accumulator = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        h = _token_hash(token)
        bucket = h % dim
        accumulator[bucket] += 1.0 if (h >> 63) == 0 else -1.0
    return normalize(accumulator)


def _remote_embed_batch(
    cfg: EmbedderConfig,
    client: httpx.Client,
    base_url: str,
    headers: dict[str, str],
    batch: list[str],
) -> list[np.ndarray]:
    payload = {"model": cfg.model_name, "input": batch}
    data = post_json(
        client,
        f"{base_url}/embeddings",
        payload,
        headers=headers,
        attempts=cfg.attempts,
        backoff=cfg.backoff,
    )
    try:
        items = sorted(data["data"], key=lambda item: item["index"])
        raw = [item["embedding"] for item in items]
    except (KeyError, TypeError) as exc:
        raise EmbeddingError(f"malformed embedding response: {exc}") from exc
    if len(raw) != len(batch):
        raise EmbeddingError(
            f"embedding service returned {len(raw)} vectors for {len(batch)} inputs"
        )
    vectors = []
    for values in raw:
        vector = np.asarray(values, dtype=np.float64)
        if vector.shape != (cfg.full_dim,):
            raise DimensionMismatchError(
                f"embedding service returned dim {vector.size}, expected {cfg.full_dim}; "
                "check full_dim against the configured model"
            )
        vectors.append(vector)
    return vectors


def _embed_remote(
    texts: list[str], cfg: EmbedderConfig, transport: httpx.BaseTransport | None
) -> list[np.ndarray]:
    base_url = (cfg.base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")
    if not base_url:
        raise EmbeddingError(f"remote backend needs a base URL (config or ${ENV_BASE_URL})")
    headers = {}
    api_key = os.environ.get(ENV_API_KEY)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    batches = [texts[i : i + cfg.batch_size] for i in range(0, len(texts), cfg.batch_size)]
    with httpx.Client(timeout=cfg.timeout, transport=transport) as client:
        if len(batches) == 1:
            results = [_remote_embed_batch(cfg, client, base_url, headers, batches[0])]
        else:
            # Bounded fan-out; results keep batch order.
            with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
                results = list(
                    pool.map(
                        lambda b: _remote_embed_batch(cfg, client, base_url, headers, b),
                        batches,
                    )
                )
    return [vector for batch in results for vector in batch]


def embed_texts(
    texts: list[str],
    cfg: EmbedderConfig,
    *,
    transport: httpx.BaseTransport | None = None,
) -> list[np.ndarray]:
    """Embed texts in order: one unit vector of cfg.output_dim per input.

    The `transport` parameter is a test seam for the remote backend
    (httpx.MockTransport); it is ignored by the hash backend.
    """
    if not texts:
        raise EmbeddingError("embed_texts requires at least one text")
    for position, text in enumerate(texts):
        if not text.strip():
            raise EmbeddingError(f"text at position {position} is empty")

    if cfg.backend == "hash":
        full = [deterministic_embed(text, cfg.full_dim) for text in texts]
        if cfg.output_dim == cfg.full_dim:
            return full  # already unit-normalized; keep bits identical
    else:
        full = _embed_remote(texts, cfg, transport)
    return [truncate_matryoshka(vector, cfg.output_dim) for vector in full]
