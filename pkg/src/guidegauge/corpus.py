"""Guideline corpus loading and token-window chunking.

A corpus is a JSONL file with one guideline article per line. Field names
vary between public dumps, so the logical fields (id, source, title, text)
are mapped to JSON keys through a configurable field map. Documents are
split into fixed-size overlapping windows of whitespace tokens; those
chunks are the unit of embedding and retrieval everywhere downstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

logger = logging.getLogger(__name__)

# Publishing organisations recognised by name; anything else is kept as a
# verbatim label (see normalize_source).
KNOWN_SOURCES = ("CCO", "CDC", "CMA", "ICRC", "NICE", "PubMed", "SPOR", "WHO", "WikiDoc")
_CANONICAL = {name.lower(): name for name in KNOWN_SOURCES}

DEFAULT_FIELD_MAP = {"id": "id", "source": "source", "title": "title", "text": "text"}

DEFAULT_CHUNK_SIZE = 512
DEFAULT_OVERLAP = 64


class CorpusError(Exception):
    """Unreadable or malformed corpus input."""


@dataclass(frozen=True)
class RecordError:
    """A problem with one corpus line, kept when running in skip mode."""

    line_number: int
    message: str


@dataclass(frozen=True)
class GuidelineDoc:
    """One guideline article: id, publishing source, title, body text."""

    id: str
    source: str
    title: str
    body: str


@dataclass(frozen=True)
class ChunkParams:
    """Token-window chunking parameters; overlap must stay below chunk_size."""

    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP

    def __post_init__(self) -> None:
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if self.overlap < 0:
            raise ValueError("overlap must be non-negative")
        if self.overlap >= self.chunk_size:
            raise ValueError("overlap must be less than chunk_size")


@dataclass(frozen=True)
class Chunk:
    """A contiguous token window of one document.

    token_span is the half-open interval [start, end) in token offsets;
    text is the space-join of exactly those tokens.
    """

    doc_id: str
    chunk_index: int
    start: int
    end: int
    text: str


def normalize_source(raw: str) -> str:
    """Map a source string to its canonical spelling, or keep the label verbatim."""
    cleaned = raw.strip()
    return _CANONICAL.get(cleaned.lower(), cleaned)


def is_known_source(source: str) -> bool:
    return source in KNOWN_SOURCES


def tokenize(text: str) -> list[str]:
    """Split on Unicode whitespace; never yields empty tokens."""
    return text.split()


def load_corpus(
    path: str | Path,
    field_map: dict[str, str] | None = None,
    *,
    strict: bool = True,
    errors: list[RecordError] | None = None,
) -> Iterator[GuidelineDoc]:
    """Yield one GuidelineDoc per JSONL line, in file order.

    With strict=True (the default) any malformed line aborts the load with
    a CorpusError naming the line. With strict=False the line is skipped
    and a RecordError is appended to `errors` (if given) and logged.
    Unknown extra keys are ignored; unknown source strings are kept as
    verbatim labels.
    """
    fmap = dict(DEFAULT_FIELD_MAP)
    if field_map:
        fmap.update(field_map)
    path = Path(path)
    seen_ids: set[str] = set()

    def bad(line_number: int, message: str) -> None:
        if strict:
            raise CorpusError(f"line {line_number}: {message}")
        record = RecordError(line_number, message)
        if errors is not None:
            errors.append(record)
        logger.warning("skipping corpus line %d: %s", line_number, message)

    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                bad(line_number, f"malformed JSON ({exc.msg})")
                continue
            if not isinstance(raw, dict):
                bad(line_number, "line is not a JSON object")
                continue

            missing = [k for k in ("id", "text") if fmap[k] not in raw]
            if missing:
                keys = ", ".join(fmap[k] for k in missing)
                bad(line_number, f"missing mapped key(s): {keys}")
                continue

            doc_id = str(raw[fmap["id"]]).strip()
            body = str(raw[fmap["text"]])
            if not doc_id:
                bad(line_number, "empty document id")
                continue
            if doc_id in seen_ids:
                bad(line_number, f"duplicate document id {doc_id!r}")
                continue
            if not body.strip():
                bad(line_number, f"document {doc_id!r} has an empty body")
                continue

            source = normalize_source(str(raw.get(fmap["source"], "")) or "Other")
            title = str(raw.get(fmap["title"], ""))
            seen_ids.add(doc_id)
            yield GuidelineDoc(id=doc_id, source=source, title=title, body=body)


def chunk_doc(doc: GuidelineDoc, params: ChunkParams) -> list[Chunk]:
    """Split a document into overlapping token windows.

    Window i starts at i * (chunk_size - overlap); the last window is
    truncated at the document end. Every token lands in at least one
    chunk, and a document no longer than chunk_size yields exactly one.
    """
    tokens = tokenize(doc.body)
    if not tokens:
        return []
    stride = params.chunk_size - params.overlap
    chunks: list[Chunk] = []
    start = 0
    index = 0
    while True:
        end = min(start + params.chunk_size, len(tokens))
        chunks.append(
            Chunk(
                doc_id=doc.id,
                chunk_index=index,
                start=start,
                end=end,
                text=" ".join(tokens[start:end]),
            )
        )
        if end >= len(tokens):
            return chunks
        start += stride
        index += 1


def fingerprint_file(path: str | Path) -> str:
    """SHA-256 hex digest of a file's bytes; identifies the corpus build input."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class ChunkStore:
    """Chunk records keyed by (doc_id, chunk_index), in insertion order.

    Insertion order matters: the vector index is built in store order and
    breaks score ties by it. Persisted as JSONL, one record per line.
    """

    _records: dict[tuple[str, int], dict] = field(default_factory=dict)

    def add(self, doc: GuidelineDoc, chunk: Chunk) -> None:
        ref = (chunk.doc_id, chunk.chunk_index)
        if ref in self._records:
            raise CorpusError(f"duplicate chunk ref {ref!r}")
        self._records[ref] = {
            "doc_id": chunk.doc_id,
            "chunk_index": chunk.chunk_index,
            "start": chunk.start,
            "end": chunk.end,
            "text": chunk.text,
            "source": doc.source,
            "title": doc.title,
        }

    def get(self, doc_id: str, chunk_index: int) -> dict:
        try:
            return self._records[(doc_id, chunk_index)]
        except KeyError:
            raise KeyError(f"unknown chunk ref {doc_id}/{chunk_index}") from None

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[dict]:
        return iter(self._records.values())

    def __contains__(self, ref: tuple[str, int]) -> bool:
        return ref in self._records

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as handle:
            for record in self:
                handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ChunkStore":
        store = cls()
        with Path(path).open("r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"chunk store line {line_number}: {exc.msg}") from exc
                ref = (record["doc_id"], record["chunk_index"])
                if ref in store._records:
                    raise CorpusError(f"chunk store line {line_number}: duplicate ref {ref!r}")
                store._records[ref] = record
        return store
