from __future__ import annotations

import json
from pathlib import Path

import pytest

from guidegauge.corpus import ChunkParams, ChunkStore, GuidelineDoc, chunk_doc
from guidegauge.embedding import EmbedderConfig, embed_texts
from guidegauge.vectorstore import VectorIndex

# Small guideline snippets reused by pipeline-level tests. Texts are
# distinct enough that hashed bag-of-words retrieval separates them.
SAMPLE_DOCS = [
    ("who-htn", "WHO", "Hypertension management",
     "Adults with confirmed hypertension should start an ACE inhibitor such as "
     "lisinopril or an angiotensin receptor blocker as first line therapy alongside "
     "lifestyle changes including reduced salt intake and regular exercise."),
    ("cdc-flu", "CDC", "Influenza antivirals",
     "Antiviral treatment with oseltamivir is recommended as early as possible for "
     "patients with suspected or confirmed influenza who are hospitalized or at high "
     "risk of complications."),
    ("nice-af", "NICE", "Atrial fibrillation anticoagulation",
     "Offer anticoagulation with a direct oral anticoagulant such as apixaban to "
     "people with atrial fibrillation and an elevated stroke risk score; aspirin "
     "monotherapy is not recommended for stroke prevention in atrial fibrillation."),
    ("pubmed-dm2", "PubMed", "Type 2 diabetes first line",
     "Metformin remains the preferred initial pharmacologic agent for type 2 "
     "diabetes together with comprehensive lifestyle modification including weight "
     "management and nutrition counseling."),
    ("mlp-sinus", "MedlinePlus", "Acute sinusitis",
     "Most cases of acute sinusitis are viral and resolve without antibiotics; "
     "reserve amoxicillin for persistent symptoms beyond ten days or severe onset "
     "with high fever and purulent discharge."),
]


def make_doc(doc_id: str = "doc", source: str = "WHO", title: str = "",
             body: str = "alpha beta gamma") -> GuidelineDoc:
    return GuidelineDoc(id=doc_id, source=source, title=title, body=body)


def build_store(docs=None, chunk_size: int = 512, overlap: int = 64) -> ChunkStore:
    store = ChunkStore()
    params = ChunkParams(chunk_size=chunk_size, overlap=overlap)
    for doc_id, source, title, body in docs or SAMPLE_DOCS:
        doc = GuidelineDoc(id=doc_id, source=source, title=title, body=body)
        for chunk in chunk_doc(doc, params):
            store.add(doc, chunk)
    return store


def build_index(store: ChunkStore, cfg: EmbedderConfig) -> VectorIndex:
    records = list(store)
    vectors = embed_texts([r["text"] for r in records], cfg)
    entries = [((r["doc_id"], r["chunk_index"]), v) for r, v in zip(records, vectors)]
    return VectorIndex.build(
        entries,
        dim=cfg.output_dim,
        metadata={"fingerprint": "test", "embedder": cfg.identity(), "built_at": "t0"},
    )


@pytest.fixture
def hash_cfg() -> EmbedderConfig:
    return EmbedderConfig(backend="hash", full_dim=64)


@pytest.fixture
def sample_store() -> ChunkStore:
    return build_store()


@pytest.fixture
def sample_index(sample_store, hash_cfg) -> VectorIndex:
    return build_index(sample_store, hash_cfg)


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
        encoding="utf-8",
    )
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    results = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(report, "when", "call") == "call":
                name = nodeid.split("::")[-1]
                results.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if results:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(results):
            terminalreporter.write_line(f"{status}  {name}")
