"""Tests for exact top-k search and the index file format."""

from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from guidegauge.vectorstore import (
    FORMAT_VERSION,
    MAGIC,
    IndexFormatError,
    SearchHit,
    VectorIndex,
    cosine,
    format_ref,
    load_index,
    parse_ref,
    save_index,
    score_all,
    search_top_k,
)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _make_index(rows: np.ndarray, metadata: dict | None = None) -> VectorIndex:
    entries = [((f"doc{i}", 0), rows[i]) for i in range(len(rows))]
    return VectorIndex.build(entries, dim=rows.shape[1], metadata=metadata or {"embedder": "t"})


def _oracle_top_k(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Independent selection: full sort by (-score, entry order), no heap."""
    scores = score_all(index, query)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], i))
    return [(i, float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# refs


class TestRefs:
    def test_round_trip(self):
        assert parse_ref(format_ref(("who-12", 3))) == ("who-12", 3)

    def test_doc_id_with_slash(self):
        assert parse_ref("a/b/7") == ("a/b", 7)

    def test_malformed(self):
        with pytest.raises(ValueError):
            parse_ref("no-separator")
        with pytest.raises(ValueError):
            parse_ref("doc/notanumber")


# ---------------------------------------------------------------------------
# cosine


class TestCosine:
    def test_self_similarity(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            u = _unit_rows(rng, 1, 16)[0]
            assert cosine(u, u) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_arithmetic(self):
        a = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
        b = np.array([4.0, 5.0, 6.0]) / np.sqrt(77.0)
        assert cosine(a, b) == pytest.approx(32 / np.sqrt(14 * 77), abs=1e-12)
        assert cosine(a, b) == pytest.approx(0.974632, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = _unit_rows(rng, 2, 32)
            assert abs(cosine(a, b) - cosine(b, a)) <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def test_clamped_to_unit_interval(self):
        v = np.ones(8) / np.sqrt(8.0)
        assert -1.0 <= cosine(v, v) <= 1.0


# ---------------------------------------------------------------------------
# search


class TestSearch:
    def test_k_exceeding_size(self):
        rng = np.random.default_rng(5)
        index = _make_index(_unit_rows(rng, 1, 8))
        hits = search_top_k(index, _unit_rows(rng, 1, 8)[0], k=5)
        assert len(hits) == 1
        assert hits[0].rank == 1

    def test_exact_match_is_rank_one(self):
        rng = np.random.default_rng(6)
        rows = _unit_rows(rng, 20, 16)
        index = _make_index(rows)
        hits = search_top_k(index, rows[7], k=3)
        assert hits[0].ref == ("doc7", 0)
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)

    def test_empty_index(self):
        index = VectorIndex.build([], dim=8, metadata={})
        assert search_top_k(index, np.zeros(8) + 1 / np.sqrt(8), k=4) == []

    def test_dim_mismatch(self):
        rng = np.random.default_rng(7)
        index = _make_index(_unit_rows(rng, 3, 8))
        with pytest.raises(ValueError, match="query dim"):
            search_top_k(index, np.ones(4) / 2.0, k=1)

    def test_bad_k(self):
        rng = np.random.default_rng(8)
        index = _make_index(_unit_rows(rng, 3, 8))
        with pytest.raises(ValueError, match="k must be"):
            search_top_k(index, _unit_rows(rng, 1, 8)[0], k=0)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(9)
        base = _unit_rows(rng, 50, 16)
        # duplicate a handful of rows to force exact score ties
        rows = np.concatenate([base, base[:10]])
        index = _make_index(rows)
        for _ in range(10):
            query = _unit_rows(rng, 1, 16)[0]
            hits = search_top_k(index, query, k=15)
            expected = _oracle_top_k(index, query, 15)
            assert [(h.ref, h.score) for h in hits] == [
                ((f"doc{i}", 0), s) for i, s in expected
            ]
            assert [h.rank for h in hits] == list(range(1, 16))
            # duplicated rows tie exactly; the lower entry index must win
            tied = [h for h in hits if h.ref[0] in {f"doc{i}" for i in range(10)}]
            for hit in tied:
                twin_score = float(score_all(index, query)[int(hit.ref[0][3:]) + 50])
                assert twin_score == hit.score

    def test_scores_match_rowwise_dots(self):
        # same arithmetic as a per-row dot product, modulo summation order
        rng = np.random.default_rng(21)
        rows = _unit_rows(rng, 40, 16)
        index = _make_index(rows)
        query = _unit_rows(rng, 1, 16)[0]
        scores = score_all(index, query)
        for i in range(len(index)):
            exact = float(np.dot(index.matrix[i].astype(np.float64), query))
            assert scores[i] == pytest.approx(exact, abs=1e-12)

    def test_query_scale_invariance(self):
        # any positive scalar multiple of the query, renormalized, ranks identically
        rng = np.random.default_rng(10)
        rows = _unit_rows(rng, 100, 24)
        index = _make_index(rows)
        raw = rng.normal(size=24)
        for scale in (1.0, 0.001, 1000.0):
            scaled = raw * scale
            query = scaled / np.linalg.norm(scaled)
            hits = search_top_k(index, query, k=10)
            baseline = search_top_k(index, raw / np.linalg.norm(raw), k=10)
            assert [h.ref for h in hits] == [h.ref for h in baseline]


class TestBuildValidation:
    def test_rejects_non_unit_entry(self):
        with pytest.raises(ValueError, match="not unit-normalized"):
            VectorIndex.build([(("d", 0), np.array([1.0, 1.0]))], dim=2, metadata={})

    def test_rejects_duplicate_refs(self):
        v = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="unique"):
            VectorIndex.build([(("d", 0), v), (("d", 0), v)], dim=2, metadata={})

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            VectorIndex(2, [("d", 0)], np.zeros((2, 2), dtype=np.float32), {})


# ---------------------------------------------------------------------------
# persistence


@pytest.fixture
def small_index() -> VectorIndex:
    rng = np.random.default_rng(11)
    rows = _unit_rows(rng, 3, 8)
    entries = [(("who-1", 0), rows[0]), (("who-1", 1), rows[1]), (("cdc-2", 0), rows[2])]
    return VectorIndex.build(
        entries, dim=8, metadata={"fingerprint": "abc", "embedder": "hash:d8t8", "built_at": "t"}
    )


class TestPersistence:
    def test_round_trip_bit_equal_at_float32(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        loaded = load_index(path)
        assert loaded.dim == small_index.dim
        assert loaded.refs == small_index.refs
        assert loaded.metadata == small_index.metadata
        assert np.array_equal(loaded.matrix, small_index.matrix)
        assert loaded.matrix.dtype == np.float32

    def test_save_is_deterministic(self, small_index, tmp_path):
        a, b = tmp_path / "a.ggix", tmp_path / "b.ggix"
        save_index(small_index, a)
        save_index(small_index, b)
        assert a.read_bytes() == b.read_bytes()

    def test_search_equal_after_reload(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        loaded = load_index(path)
        rng = np.random.default_rng(12)
        query = _unit_rows(rng, 1, 8)[0]
        assert search_top_k(loaded, query, 3) == search_top_k(small_index, query, 3)

    def test_truncated_file_never_loads(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = path.read_bytes()
        # chop mid-record (keep the header, lose entries and trailer)
        for cut in (len(data) - 5, len(data) // 2, 30):
            clipped = tmp_path / "clipped.ggix"
            clipped.write_bytes(data[:cut])
            with pytest.raises(IndexFormatError, match="checksum|truncated|too short"):
                load_index(clipped)

    def test_bad_magic(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(IndexFormatError, match="magic"):
            load_index(path)

    def test_bumped_version(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(data))
        with pytest.raises(IndexFormatError, match="version"):
            load_index(path)

    def test_corrupted_payload_fails_checksum(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = bytearray(path.read_bytes())
        data[40] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IndexFormatError, match="checksum"):
            load_index(path)

    def test_tampered_trailer_fails_checksum(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(IndexFormatError, match="checksum"):
            load_index(path)

    def test_tiny_file(self, tmp_path):
        path = tmp_path / "index.ggix"
        path.write_bytes(MAGIC)
        with pytest.raises(IndexFormatError, match="too short"):
            load_index(path)

    def test_header_fields_on_disk(self, small_index, tmp_path):
        path = tmp_path / "index.ggix"
        save_index(small_index, path)
        data = path.read_bytes()
        assert data[:4] == MAGIC
        version, dim, count = struct.unpack_from("<IIQ", data, 4)
        assert (version, dim, count) == (FORMAT_VERSION, 8, 3)
        (meta_len,) = struct.unpack_from("<I", data, 20)
        metadata = json.loads(data[24 : 24 + meta_len])
        assert metadata["embedder"] == "hash:d8t8"

    def test_empty_index_round_trip(self, tmp_path):
        index = VectorIndex.build([], dim=4, metadata={"embedder": "x"})
        path = tmp_path / "empty.ggix"
        save_index(index, path)
        loaded = load_index(path)
        assert len(loaded) == 0
        assert loaded.dim == 4


def test_search_hit_is_comparable():
    hit = SearchHit(ref=("d", 0), score=0.5, rank=1)
    assert hit == SearchHit(ref=("d", 0), score=0.5, rank=1)
