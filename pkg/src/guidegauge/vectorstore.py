"""Exact cosine top-k search over chunk vectors, with binary persistence.

The index is immutable once built. Entry order is the build order and is
part of the persisted format: ties in score are broken by ascending entry
order, so two builds from the same inputs rank identically. Vectors are
stored float32 on disk; scores are accumulated in float64.

File layout (little-endian):
    magic "GGIX" | version u32 | dim u32 | count u64
    | metadata length u32 | metadata JSON (UTF-8)
    | per entry: doc_id length u32, doc_id UTF-8, chunk_index u32, dim * f32
    | CRC32 u32 of all preceding bytes
"""

from __future__ import annotations

import heapq
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import NORM_TOL

MAGIC = b"GGIX"
FORMAT_VERSION = 1

ChunkRef = tuple[str, int]


class IndexFormatError(Exception):
    """Corrupt or unsupported index file; the message names the failed field."""


def format_ref(ref: ChunkRef) -> str:
    """Render a chunk ref as "doc_id/chunk_index" for wire and report use."""
    return f"{ref[0]}/{ref[1]}"


def parse_ref(text: str) -> ChunkRef:
    """Parse "doc_id/chunk_index"; the index is the part after the last slash."""
    doc_id, _, index = text.rpartition("/")
    if not doc_id or not index.isdigit():
        raise ValueError(f"malformed chunk ref {text!r}")
    return doc_id, int(index)


@dataclass(frozen=True)
class SearchHit:
    ref: ChunkRef
    score: float
    rank: int  # 1-based


class VectorIndex:
    """Ordered (chunk ref, unit vector) entries plus build metadata."""

    def __init__(self, dim: int, refs: list[ChunkRef], matrix: np.ndarray, metadata: dict):
        if dim <= 0:
            raise ValueError("dim must be positive")
        if matrix.shape != (len(refs), dim):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(refs)}x{dim}")
        if len(set(refs)) != len(refs):
            raise ValueError("chunk refs must be unique within an index")
        self.dim = dim
        self.refs = list(refs)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self.metadata = dict(metadata)

    def __len__(self) -> int:
        return len(self.refs)

    @classmethod
    def build(
        cls, entries: list[tuple[ChunkRef, np.ndarray]], dim: int, metadata: dict
    ) -> "VectorIndex":
        refs = [ref for ref, _ in entries]
        if entries:
            matrix = np.stack([np.asarray(v, dtype=np.float64) for _, v in entries])
            norms = np.sqrt(np.sum(matrix * matrix, axis=1))
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                worst = refs[int(np.argmax(np.abs(norms - 1.0)))]
                raise ValueError(f"entry {format_ref(worst)} is not unit-normalized")
            matrix = matrix.astype(np.float32)
        else:
            matrix = np.zeros((0, dim), dtype=np.float32)
        return cls(dim, refs, matrix, metadata)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of unit vectors, clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    assert abs(float(np.sqrt(np.sum(a * a))) - 1.0) <= 1e-4, "cosine expects unit vectors"
    assert abs(float(np.sqrt(np.sum(b * b))) - 1.0) <= 1e-4, "cosine expects unit vectors"
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def score_all(index: VectorIndex, query: np.ndarray) -> np.ndarray:
    """Brute-force cosine of the query against every entry, in entry order."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.size} does not match index dim {index.dim}")
    scores = index.matrix @ query  # float32 rows promote to float64
    return np.clip(scores, -1.0, 1.0)


def search_top_k(index: VectorIndex, query: np.ndarray, k: int) -> list[SearchHit]:
    """Exact top-k by cosine, ties broken by ascending entry order.

    Scores every entry (float64) and selects k with a bounded heap, which
    reproduces the full sort by (-score, entry order) exactly.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = score_all(index, query)
    if len(index) == 0:
        return []
    top = heapq.nsmallest(min(k, len(index)), range(len(index)), key=lambda i: (-scores[i], i))
    return [
        SearchHit(ref=index.refs[i], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(top, start=1)
    ]


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the index; the trailing CRC32 covers every preceding byte."""
    parts = [MAGIC, struct.pack("<IIQ", FORMAT_VERSION, index.dim, len(index))]
    metadata = json.dumps(index.metadata, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts.append(struct.pack("<I", len(metadata)))
    parts.append(metadata)
    for (doc_id, chunk_index), row in zip(index.refs, index.matrix):
        doc_bytes = doc_id.encode("utf-8")
        parts.append(struct.pack("<I", len(doc_bytes)))
        parts.append(doc_bytes)
        parts.append(struct.pack("<I", chunk_index))
        parts.append(row.astype("<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Cursor:
    """Sequential reader that reports truncation as a format error."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexFormatError(f"truncated index file while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_index(path: str | Path) -> VectorIndex:
    """Read and validate an index file (magic, version, checksum, counts)."""
    data = Path(path).read_bytes()
    # magic + version + dim + count + metadata length + trailing CRC
    min_size = len(MAGIC) + 4 + 4 + 8 + 4 + 4
    if len(data) < min_size:
        raise IndexFormatError("file too short to contain an index header")
    cursor = _Cursor(data)
    magic = cursor.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cursor.u32("format version")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported format version {version}")

    body, trailer = data[:-4], data[-4:]
    expected_crc = struct.unpack("<I", trailer)[0]
    actual_crc = zlib.crc32(body)
    if actual_crc != expected_crc:
        raise IndexFormatError(
            f"checksum mismatch: file says {expected_crc:#010x}, computed {actual_crc:#010x}"
        )
    cursor.data = body  # entries must stop before the trailer

    dim = cursor.u32("dim")
    if dim == 0:
        raise IndexFormatError("dim must be positive")
    count = cursor.u64("entry count")
    metadata_len = cursor.u32("metadata length")
    try:
        metadata = json.loads(cursor.take(metadata_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"unreadable metadata block: {exc}") from exc

    refs: list[ChunkRef] = []
    rows = np.zeros((count, dim), dtype=np.float32)
    for i in range(count):
        doc_len = cursor.u32("doc_id length")
        doc_id = cursor.take(doc_len, "doc_id").decode("utf-8")
        chunk_index = cursor.u32("chunk_index")
        raw = cursor.take(dim * 4, "vector values")
        refs.append((doc_id, chunk_index))
        rows[i] = np.frombuffer(raw, dtype="<f4")
    if cursor.pos != len(body):
        raise IndexFormatError(f"{len(body) - cursor.pos} unexpected trailing bytes")
    if len(set(refs)) != len(refs):
        raise IndexFormatError("duplicate chunk ref in entries")
    return VectorIndex(dim, refs, rows, metadata)
