"""The four-stage evaluation pipeline over a single medical note.

Stages run strictly forward: extract diagnoses and treatments, generate
retrieval queries, retrieve guideline chunks, judge each diagnosis. Each
LLM-backed stage demands structured JSON output and gets exactly one
corrective re-prompt; a second malformed reply fails the note at that
stage, preserving whatever artifacts earlier stages produced.

A diagnosis extracted with no treatments is judged MissingTreatment
locally, by code; that rule is mechanical and is never delegated to the
model.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from ._http import TransportError
from .corpus import ChunkStore, tokenize
from .embedding import EmbedderConfig, EmbeddingError, embed_texts
from .llm import (
    LlmRequest,
    StructuredOutputError,
    TranscriptError,
    assistant,
    complete,
    extract_json_block,
    system,
    user,
)
from .scoring import JudgmentStatus, NoteScore, score_judgments
from .vectorstore import ChunkRef, VectorIndex, format_ref, parse_ref, search_top_k

logger = logging.getLogger(__name__)

DEFAULT_N_QUERIES = 5
DEFAULT_TOP_K = 4
NOTE_WORD_RANGE = (300, 1000)

QUERY_MODES = ("fixed", "per_diagnosis")

DEFAULT_PROMPT_DIR = Path(__file__).parent / "prompts"
PROMPT_NAMES = ("extractor", "query", "scorer")

_STATUS_ALIASES = {
    "followed": JudgmentStatus.FOLLOWED,
    "notfollowed": JudgmentStatus.NOT_FOLLOWED,
    "missingtreatment": JudgmentStatus.MISSING_TREATMENT,
}


class StageError(Exception):
    """Terminal failure of one pipeline stage (after any permitted re-prompt)."""


class Stage(str, Enum):
    PENDING = "pending"
    EXTRACTING = "extracting"
    QUERYING = "querying"
    RETRIEVING = "retrieving"
    SCORING = "scoring"
    DONE = "done"
    FAILED = "failed"


_STAGE_ORDER = (
    Stage.PENDING,
    Stage.EXTRACTING,
    Stage.QUERYING,
    Stage.RETRIEVING,
    Stage.SCORING,
    Stage.DONE,
)


class StageTracker:
    """Enforces forward-only stage transitions and records the sequence."""

    def __init__(self) -> None:
        self.history: list[Stage] = [Stage.PENDING]

    @property
    def current(self) -> Stage:
        return self.history[-1]

    def advance(self, stage: Stage) -> None:
        if self.current in (Stage.DONE, Stage.FAILED):
            raise ValueError(f"cannot leave terminal state {self.current.value}")
        expected = _STAGE_ORDER[_STAGE_ORDER.index(self.current) + 1]
        if stage is not expected:
            raise ValueError(
                f"illegal transition {self.current.value} -> {stage.value}; "
                f"expected {expected.value}"
            )
        self.history.append(stage)

    def fail(self) -> None:
        if self.current in (Stage.DONE, Stage.FAILED):
            raise ValueError(f"cannot leave terminal state {self.current.value}")
        self.history.append(Stage.FAILED)


@dataclass(frozen=True)
class MedicalNote:
    id: str
    specialty: str
    text: str


@dataclass(frozen=True)
class DiagnosisFinding:
    """A diagnosis with the treatments and verbatim note quote backing it."""

    diagnosis: str
    treatments: tuple[str, ...]
    evidence: str


@dataclass(frozen=True)
class QuerySet:
    queries: tuple[str, ...]


@dataclass(frozen=True)
class EvidenceHit:
    ref: ChunkRef
    score: float
    rank: int
    source: str
    text: str


@dataclass(frozen=True)
class QueryEvidence:
    query: str
    hits: tuple[EvidenceHit, ...]


@dataclass(frozen=True)
class EvidenceBundle:
    per_query: tuple[QueryEvidence, ...]

    def refs(self) -> set[ChunkRef]:
        return {hit.ref for entry in self.per_query for hit in entry.hits}

    def flattened(self) -> list[EvidenceHit]:
        """Hits across queries, deduplicated by ref, first occurrence kept."""
        seen: set[ChunkRef] = set()
        out: list[EvidenceHit] = []
        for entry in self.per_query:
            for hit in entry.hits:
                if hit.ref not in seen:
                    seen.add(hit.ref)
                    out.append(hit)
        return out


@dataclass(frozen=True)
class Judgment:
    diagnosis: str
    status: JudgmentStatus
    rationale: str
    cited_chunks: tuple[ChunkRef, ...]


@dataclass
class NoteReport:
    """Everything one note's evaluation produced, including partial artifacts
    when a stage failed."""

    note_id: str
    specialty: str
    status: Stage
    failed_stage: str | None
    error: str | None
    findings: list[DiagnosisFinding]
    queries: list[str]
    evidence: EvidenceBundle | None
    judgments: list[Judgment]
    score: NoteScore | None
    timings: dict[str, float]

    @property
    def done(self) -> bool:
        return self.status is Stage.DONE

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "note_id": self.note_id,
            "specialty": self.specialty,
            "status": self.status.value,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "findings": [
                {
                    "diagnosis": f.diagnosis,
                    "treatments": list(f.treatments),
                    "evidence": f.evidence,
                }
                for f in self.findings
            ],
            "queries": list(self.queries),
            "evidence": None
            if self.evidence is None
            else [
                {
                    "query": entry.query,
                    "hits": [
                        {
                            "ref": format_ref(hit.ref),
                            "score": hit.score,
                            "rank": hit.rank,
                            "source": hit.source,
                            "text": hit.text,
                        }
                        for hit in entry.hits
                    ],
                }
                for entry in self.evidence.per_query
            ],
            "judgments": [
                {
                    "diagnosis": j.diagnosis,
                    "status": j.status.value,
                    "rationale": j.rationale,
                    "cited_chunks": [format_ref(ref) for ref in j.cited_chunks],
                }
                for j in self.judgments
            ],
            "score": None
            if self.score is None
            else {
                "followed": self.score.followed,
                "not_followed": self.score.not_followed,
                "score": self.score.score,
            },
            "timings": self.timings,
        }


@dataclass
class PipelineDeps:
    """Shared dependencies for evaluating notes; the index and store are
    read-only, the llm backend handles its own concurrency limits."""

    index: VectorIndex
    store: ChunkStore
    embedder: EmbedderConfig
    llm: object
    prompts: dict[str, str] = field(default_factory=dict)
    n_queries: int = DEFAULT_N_QUERIES
    query_mode: str = "fixed"
    k: int = DEFAULT_TOP_K
    max_tokens: int = 1024
    clock: Callable[[], float] = time.perf_counter

    def __post_init__(self) -> None:
        if self.n_queries < 1:
            raise ValueError("n_queries must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"unknown query mode {self.query_mode!r}")
        if not self.prompts:
            self.prompts = load_prompts(DEFAULT_PROMPT_DIR)


def load_prompts(directory: str | Path) -> dict[str, str]:
    """Read the prompt templates from a directory of <name>.txt files."""
    directory = Path(directory)
    prompts = {}
    for name in PROMPT_NAMES:
        path = directory / f"{name}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"missing prompt template {path}")
        prompts[name] = path.read_text(encoding="utf-8")
    return prompts


def render_prompt(template: str, **values: str) -> str:
    # Plain placeholder replacement: templates contain JSON braces, so
    # str.format would choke on them.
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


def _structured_call(deps: PipelineDeps, messages: list, tag: str, parser: Callable):
    """One completion plus one corrective re-prompt, then give up.

    The parser raises StructuredOutputError for anything unusable; its
    message is appended to the conversation before the retry so the model
    sees what was wrong.
    """
    request = LlmRequest(tuple(messages), max_tokens=deps.max_tokens, tag=tag)
    text = complete(request, deps.llm)
    try:
        return parser(text)
    except StructuredOutputError as first_error:
        logger.warning("%s output rejected (%s); re-prompting once", tag, first_error)
        retry_messages = tuple(
            messages
            + [
                assistant(text if text.strip() else "(empty reply)"),
                user(
                    f"Your previous reply could not be used: {first_error}. "
                    "Reply again with only the corrected JSON."
                ),
            ]
        )
        retry = LlmRequest(retry_messages, max_tokens=deps.max_tokens, tag=tag)
        text = complete(retry, deps.llm)
        try:
            return parser(text)
        except StructuredOutputError as second_error:
            raise StageError(f"{tag} output unusable after re-prompt: {second_error}") from second_error


def _dedupe_case_insensitive(items: list[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        key = item.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(item.strip())
    return out


# ---------------------------------------------------------------------------
# Stage 1: extractor


def _parse_findings(text: str, note: MedicalNote) -> list[DiagnosisFinding]:
    value = extract_json_block(text)
    if not isinstance(value, list):
        raise StructuredOutputError("expected a JSON array of findings")
    findings = []
    for position, item in enumerate(value):
        if not isinstance(item, dict):
            raise StructuredOutputError(f"finding {position} is not an object")
        diagnosis = str(item.get("diagnosis", "")).strip()
        if not diagnosis:
            raise StructuredOutputError(f"finding {position} has an empty diagnosis")
        treatments = item.get("treatments", [])
        if not isinstance(treatments, list) or not all(isinstance(t, str) for t in treatments):
            raise StructuredOutputError(f"finding {position} treatments must be strings")
        evidence = str(item.get("evidence", ""))
        if evidence not in note.text:
            # Grounding check failed: drop the finding rather than trust it.
            logger.warning(
                "note %s: dropping finding %r, evidence quote not found in note",
                note.id,
                diagnosis,
            )
            continue
        findings.append(
            DiagnosisFinding(
                diagnosis=diagnosis,
                treatments=tuple(_dedupe_case_insensitive(list(treatments))),
                evidence=evidence,
            )
        )
    return findings


def run_extractor(note: MedicalNote, deps: PipelineDeps) -> list[DiagnosisFinding]:
    """Pull (diagnosis, treatments, evidence quote) triples out of the note."""
    prompt = render_prompt(deps.prompts["extractor"], note=note.text)
    messages = [
        system("You extract structured clinical facts and reply only with JSON."),
        user(prompt),
    ]
    return _structured_call(deps, messages, "extractor", lambda t: _parse_findings(t, note))


# ---------------------------------------------------------------------------
# Stage 2: query generation


def _pad_queries(
    queries: list[str], target: int, findings: list[DiagnosisFinding], specialty: str
) -> list[str]:
    """Top up to exactly `target` queries with deterministic templates."""
    candidates = [f"guidelines for {f.diagnosis}" for f in findings]
    candidates.append(f"clinical guidelines {specialty}")
    counter = 2
    out = list(queries)
    seen = {q.lower() for q in out}
    while len(out) < target:
        if candidates:
            candidate = candidates.pop(0)
        else:
            candidate = f"clinical guidelines {specialty} {counter}"
            counter += 1
        if candidate.lower() not in seen:
            seen.add(candidate.lower())
            out.append(candidate)
    return out


def _parse_queries(text: str) -> list[str]:
    value = extract_json_block(text)
    if not isinstance(value, list) or not all(isinstance(q, str) for q in value):
        raise StructuredOutputError("expected a JSON array of query strings")
    return [q for q in value if q.strip()]


def run_query_agent(
    note: MedicalNote, findings: list[DiagnosisFinding], deps: PipelineDeps
) -> QuerySet:
    """Produce exactly the configured number of retrieval queries.

    In per_diagnosis mode the target count is one query per finding (and
    no model call happens when there is nothing to query). Model output is
    deduplicated, truncated in order, and padded with template queries so
    the count contract holds even against a misbehaving model.
    """
    if deps.query_mode == "per_diagnosis":
        target = len(findings)
        if target == 0:
            return QuerySet(())
        mode_hint = "Write exactly one query per extracted finding, in the order listed."
    else:
        target = deps.n_queries
        mode_hint = ""

    findings_json = json.dumps(
        [{"diagnosis": f.diagnosis, "treatments": list(f.treatments)} for f in findings],
        ensure_ascii=False,
    )
    prompt = render_prompt(
        deps.prompts["query"],
        note=note.text,
        findings=findings_json,
        n_queries=str(target),
        mode_hint=mode_hint,
    )
    messages = [
        system("You write retrieval queries and reply only with JSON."),
        user(prompt),
    ]
    raw = _structured_call(deps, messages, "query", _parse_queries)
    queries = _dedupe_case_insensitive(raw)[:target]
    if len(queries) < target:
        logger.info(
            "note %s: padding %d model queries to %d with templates",
            note.id,
            len(queries),
            target,
        )
        queries = _pad_queries(queries, target, findings, note.specialty)
    return QuerySet(tuple(queries))


# ---------------------------------------------------------------------------
# Stage 3: retrieval


def run_retriever(queries: QuerySet, deps: PipelineDeps) -> EvidenceBundle:
    """Embed each query, search the index, and resolve hit texts.

    The embedder configured for the run must be the one the index was
    built with (identity string and dimension both checked); otherwise the
    scores would be meaningless.
    """
    built_with = deps.index.metadata.get("embedder", "")
    if built_with != deps.embedder.identity():
        raise ValueError(
            f"embedder mismatch: index built with {built_with!r}, "
            f"configured {deps.embedder.identity()!r}"
        )
    if deps.index.dim != deps.embedder.output_dim:
        raise ValueError(
            f"dimension mismatch: index dim {deps.index.dim}, "
            f"embedder produces {deps.embedder.output_dim}"
        )
    if not queries.queries:
        return EvidenceBundle(())

    vectors = embed_texts(list(queries.queries), deps.embedder)
    per_query = []
    for query, vector in zip(queries.queries, vectors):
        hits = search_top_k(deps.index, vector, deps.k)
        resolved = []
        for hit in hits:
            record = deps.store.get(*hit.ref)
            resolved.append(
                EvidenceHit(
                    ref=hit.ref,
                    score=hit.score,
                    rank=hit.rank,
                    source=record["source"],
                    text=record["text"],
                )
            )
        per_query.append(QueryEvidence(query=query, hits=tuple(resolved)))
    return EvidenceBundle(tuple(per_query))


# ---------------------------------------------------------------------------
# Stage 4: scorer


def _render_evidence(evidence: EvidenceBundle) -> str:
    blocks = []
    for hit in evidence.flattened():
        blocks.append(f"[{format_ref(hit.ref)}] ({hit.source}) {hit.text}")
    return "\n\n".join(blocks) if blocks else "(no guideline excerpts were retrieved)"


def _parse_status(raw: object) -> JudgmentStatus:
    key = str(raw).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
    status = _STATUS_ALIASES.get(key)
    if status is None:
        raise StructuredOutputError(f"status {raw!r} is not Followed/NotFollowed")
    return status


def _parse_judgments(
    text: str, findings: list[DiagnosisFinding], evidence: EvidenceBundle
) -> list[Judgment]:
    """Validate the scorer's output against the findings and the evidence.

    Only findings that documented treatments need a model judgment;
    judgments for the remainder are ignored (they are force-assigned
    MissingTreatment by the caller). Cited refs that were never retrieved
    are stripped; a Followed/NotFollowed judgment left with no citations
    is unusable.
    """
    value = extract_json_block(text)
    if not isinstance(value, list):
        raise StructuredOutputError("expected a JSON array of judgments")
    known_refs = evidence.refs()

    # Consume model judgments per diagnosis, tolerating duplicates in the
    # findings multiset (each needs its own judgment).
    pool: dict[str, list[dict]] = {}
    for position, item in enumerate(value):
        if not isinstance(item, dict):
            raise StructuredOutputError(f"judgment {position} is not an object")
        pool.setdefault(str(item.get("diagnosis", "")).strip().lower(), []).append(item)

    judgments = []
    for finding in findings:
        if not finding.treatments:
            continue
        matches = pool.get(finding.diagnosis.lower(), [])
        if not matches:
            raise StructuredOutputError(f"no judgment returned for {finding.diagnosis!r}")
        item = matches.pop(0)
        status = _parse_status(item.get("status"))
        if status is JudgmentStatus.MISSING_TREATMENT:
            raise StructuredOutputError(
                f"{finding.diagnosis!r} documents treatments; MissingTreatment is not valid"
            )
        cited: list[ChunkRef] = []
        raw_refs = item.get("cited_chunks", [])
        if not isinstance(raw_refs, list):
            raise StructuredOutputError(f"cited_chunks for {finding.diagnosis!r} must be a list")
        for raw_ref in raw_refs:
            try:
                ref = parse_ref(str(raw_ref))
            except ValueError:
                logger.warning("stripping malformed citation %r", raw_ref)
                continue
            if ref not in known_refs:
                logger.warning("stripping citation %r: not in retrieved evidence", raw_ref)
                continue
            if ref not in cited:
                cited.append(ref)
        if not cited:
            raise StructuredOutputError(
                f"judgment for {finding.diagnosis!r} cites no retrieved evidence"
            )
        judgments.append(
            Judgment(
                diagnosis=finding.diagnosis,
                status=status,
                rationale=str(item.get("rationale", "")).strip(),
                cited_chunks=tuple(cited),
            )
        )
    return judgments


def run_scorer(
    findings: list[DiagnosisFinding], evidence: EvidenceBundle, deps: PipelineDeps
) -> list[Judgment]:
    """One judgment per finding, in finding order.

    Findings without documented treatments are assigned MissingTreatment
    here, mechanically; the model is only consulted for the rest.
    """
    if not findings:
        return []
    judged = iter([])
    if any(f.treatments for f in findings):
        findings_json = json.dumps(
            [
                {"diagnosis": f.diagnosis, "treatments": list(f.treatments)}
                for f in findings
                if f.treatments
            ],
            ensure_ascii=False,
            indent=2,
        )
        prompt = render_prompt(
            deps.prompts["scorer"],
            findings=findings_json,
            evidence=_render_evidence(evidence),
        )
        messages = [
            system("You audit clinical documentation against guidelines and reply only with JSON."),
            user(prompt),
        ]
        judged = iter(
            _structured_call(
                deps, messages, "scorer", lambda t: _parse_judgments(t, findings, evidence)
            )
        )

    out = []
    for finding in findings:
        if finding.treatments:
            out.append(next(judged))
        else:
            out.append(
                Judgment(
                    diagnosis=finding.diagnosis,
                    status=JudgmentStatus.MISSING_TREATMENT,
                    rationale="The note documents this diagnosis without any treatment.",
                    cited_chunks=(),
                )
            )
    return out


# ---------------------------------------------------------------------------
# Full pipeline


def evaluate_note(note: MedicalNote, deps: PipelineDeps) -> NoteReport:
    """Drive one note through all stages; never raises for stage failures.

    A failed stage yields a report with status "failed", the failing
    stage's name, and every artifact produced before the failure.
    """
    words = len(tokenize(note.text))
    if not NOTE_WORD_RANGE[0] <= words <= NOTE_WORD_RANGE[1]:
        logger.warning(
            "note %s: %d words is outside the expected range %s",
            note.id,
            words,
            NOTE_WORD_RANGE,
        )

    tracker = StageTracker()
    findings: list[DiagnosisFinding] = []
    queries = QuerySet(())
    evidence: EvidenceBundle | None = None
    judgments: list[Judgment] = []
    timings: dict[str, float] = {}

    def failed(error: Exception) -> NoteReport:
        stage = tracker.current
        tracker.fail()
        logger.error("note %s failed at %s: %s", note.id, stage.value, error)
        return NoteReport(
            note_id=note.id,
            specialty=note.specialty,
            status=Stage.FAILED,
            failed_stage=stage.value,
            error=str(error),
            findings=findings,
            queries=list(queries.queries),
            evidence=evidence,
            judgments=judgments,
            score=None,
            timings=timings,
        )

    stages = (
        (Stage.EXTRACTING, lambda: run_extractor(note, deps)),
        (Stage.QUERYING, lambda: run_query_agent(note, findings, deps)),
        (Stage.RETRIEVING, lambda: run_retriever(queries, deps)),
        (Stage.SCORING, lambda: run_scorer(findings, evidence, deps)),
    )
    for stage, run in stages:
        tracker.advance(stage)
        started = deps.clock()
        try:
            result = run()
        except (
            StageError,
            StructuredOutputError,
            TranscriptError,
            TransportError,
            EmbeddingError,
        ) as exc:
            timings[stage.value] = deps.clock() - started
            return failed(exc)
        timings[stage.value] = deps.clock() - started
        if stage is Stage.EXTRACTING:
            findings = result
        elif stage is Stage.QUERYING:
            queries = result
        elif stage is Stage.RETRIEVING:
            evidence = result
        else:
            judgments = result

    tracker.advance(Stage.DONE)
    return NoteReport(
        note_id=note.id,
        specialty=note.specialty,
        status=Stage.DONE,
        failed_stage=None,
        error=None,
        findings=findings,
        queries=list(queries.queries),
        evidence=evidence,
        judgments=judgments,
        score=score_judgments(judgments),
        timings=timings,
    )


def load_notes(path: str | Path) -> list[MedicalNote]:
    """Read a notes JSONL file ({"id", "specialty", "text"} per line)."""
    notes = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"notes line {line_number}: {exc.msg}") from exc
            note_id = str(record.get("id", "")).strip()
            text = str(record.get("text", ""))
            if not note_id or not text.strip():
                raise ValueError(f"notes line {line_number}: needs non-empty id and text")
            if note_id in seen:
                raise ValueError(f"notes line {line_number}: duplicate note id {note_id!r}")
            seen.add(note_id)
            notes.append(
                MedicalNote(id=note_id, specialty=str(record.get("specialty", "")), text=text)
            )
    return notes
