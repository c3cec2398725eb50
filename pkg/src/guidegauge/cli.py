"""The gg command line: ingest a corpus, build the index, evaluate notes,
re-render reports, and run the offline self-test.

Exit codes: 0 success, 1 evaluation failures, 2 usage or configuration
errors, 3 I/O or corrupt data.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from ._http import TransportError
from .config import Config, ConfigError, load_config
from .corpus import ChunkStore, CorpusError, RecordError, chunk_doc, fingerprint_file, load_corpus
from .embedding import DimensionMismatchError, EmbeddingError, embed_texts
from .llm import LlmError, MockChatBackend, RemoteChatBackend, TranscriptError
from .pipeline import (
    DEFAULT_PROMPT_DIR,
    NoteReport,
    PipelineDeps,
    evaluate_note,
    load_notes,
    load_prompts,
)
from .report import (
    ReportError,
    RunReport,
    emit_dot,
    emit_json,
    emit_table,
    rederive_rows,
    scored_note_from_dict,
)
from .scoring import SpecialtyRow, aggregate_specialty
from .vectorstore import IndexFormatError, VectorIndex, load_index, save_index

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_EVAL_FAILURES = 1
EXIT_USAGE = 2
EXIT_DATA = 3

SELFTEST_TIMESTAMP = "2000-01-01T00:00:00Z"
SELFTEST_RUN_ID = "selftest"

FIXTURES_DIR = Path(__file__).parent / "fixtures"


def _now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _counter_clock():
    """A fake clock advancing one second per reading, for reproducible timings."""
    state = iter(range(10**9))
    return lambda: float(next(state))


def _fail(message: str) -> None:
    print(f"gg: error: {message}", file=sys.stderr)


def _check_exists(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


def _check_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


def _safe_filename(note_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-._" else "_" for c in note_id)


# ---------------------------------------------------------------------------
# ingest


def run_ingest(corpus_path: Path, out_path: Path, config: Config, force: bool) -> dict:
    _check_exists(corpus_path, "corpus file")
    _check_overwrite(out_path, force)
    params = config.chunk_params()

    record_errors: list[RecordError] = []
    store = ChunkStore()
    doc_count = 0
    for doc in load_corpus(
        corpus_path, config.field_map, strict=config.strict, errors=record_errors
    ):
        doc_count += 1
        for chunk in chunk_doc(doc, params):
            store.add(doc, chunk)
    if doc_count == 0:
        raise CorpusError(f"no documents loaded from {corpus_path}")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    store.save(out_path)
    meta = {
        "fingerprint": fingerprint_file(corpus_path),
        "chunk_size": params.chunk_size,
        "overlap": params.overlap,
        "documents": doc_count,
        "chunks": len(store),
        "skipped_lines": [e.line_number for e in record_errors],
    }
    Path(f"{out_path}.meta.json").write_text(emit_json(meta), encoding="utf-8")
    return meta


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    for logical, flag in (("id", "id_key"), ("source", "source_key"),
                          ("title", "title_key"), ("text", "text_key")):
        value = getattr(args, flag)
        if value:
            config.field_map[logical] = value
    meta = run_ingest(Path(args.corpus), Path(args.out), config, args.force)
    skipped = len(meta["skipped_lines"])
    print(
        f"ingested {meta['documents']} documents into {meta['chunks']} chunks"
        + (f" ({skipped} lines skipped)" if skipped else "")
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# index


def run_index(chunks_path: Path, out_path: Path, config: Config, force: bool,
              timestamp: str) -> VectorIndex:
    _check_exists(chunks_path, "chunk store")
    _check_overwrite(out_path, force)
    store = ChunkStore.load(chunks_path)
    if len(store) == 0:
        raise CorpusError(f"chunk store {chunks_path} is empty")

    meta_path = Path(f"{chunks_path}.meta.json")
    if meta_path.is_file():
        fingerprint = json.loads(meta_path.read_text(encoding="utf-8"))["fingerprint"]
    else:
        logger.warning("no ingest metadata next to %s; fingerprinting the store", chunks_path)
        fingerprint = fingerprint_file(chunks_path)

    embedder = config.embedder_config()
    records = list(store)
    vectors = embed_texts([r["text"] for r in records], embedder)
    entries = [((r["doc_id"], r["chunk_index"]), v) for r, v in zip(records, vectors)]
    index = VectorIndex.build(
        entries,
        dim=embedder.output_dim,
        metadata={
            "fingerprint": fingerprint,
            "embedder": embedder.identity(),
            "built_at": timestamp,
        },
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out_path)
    return index


def cmd_index(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    index = run_index(
        Path(args.chunks), Path(args.out), config, args.force, args.timestamp or _now_iso()
    )
    print(f"indexed {len(index)} chunks at dim {index.dim} ({index.metadata['embedder']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _build_llm(config: Config, mock_path: Path | None):
    if mock_path is not None:
        return MockChatBackend.from_jsonl(mock_path)
    return RemoteChatBackend(config.llm_model, config.base_url)


def run_eval(
    notes_path: Path,
    index_path: Path,
    chunks_path: Path,
    run_dir: Path,
    config: Config,
    *,
    mock_path: Path | None = None,
    keep_going: bool = False,
    force: bool = False,
    run_id: str | None = None,
    timestamp: str | None = None,
    fixed_clock: bool = False,
) -> tuple[list[NoteReport], list[SpecialtyRow], int]:
    """Evaluate every note and write the run directory.

    Returns (reports, specialty rows, exit code). The index and chunk
    store are loaded and checked against the configured embedder before
    any model call happens.
    """
    _check_exists(notes_path, "notes file")
    _check_exists(index_path, "index file")
    _check_exists(chunks_path, "chunk store")
    if mock_path is not None:
        _check_exists(mock_path, "mock transcript")
        if config.workers > 1:
            raise ConfigError("the mock backend is strictly sequential; use --workers 1")
    elif config.llm_backend == "mock":
        raise ConfigError("llm backend 'mock' needs a transcript (--mock <path>)")

    index = load_index(index_path)
    store = ChunkStore.load(chunks_path)
    try:
        notes = load_notes(notes_path)
    except ValueError as exc:
        raise CorpusError(str(exc)) from exc
    if not notes:
        raise CorpusError(f"no notes found in {notes_path}")

    embedder = config.embedder_config()
    if index.metadata.get("embedder") != embedder.identity():
        raise ConfigError(
            f"index was built with {index.metadata.get('embedder')!r} but the "
            f"configured embedder is {embedder.identity()!r}"
        )
    if index.dim != embedder.output_dim:
        raise ConfigError(
            f"index dim {index.dim} does not match embedder output dim {embedder.output_dim}"
        )
    store_meta = Path(f"{chunks_path}.meta.json")
    if store_meta.is_file():
        fingerprint = json.loads(store_meta.read_text(encoding="utf-8"))["fingerprint"]
        if fingerprint != index.metadata.get("fingerprint"):
            raise ConfigError(
                "chunk store and index come from different corpora "
                f"(fingerprints {fingerprint[:12]}… vs "
                f"{str(index.metadata.get('fingerprint'))[:12]}…)"
            )

    llm = _build_llm(config, mock_path)
    prompts = load_prompts(config.prompt_dir or DEFAULT_PROMPT_DIR)
    deps = PipelineDeps(
        index=index,
        store=store,
        embedder=embedder,
        llm=llm,
        prompts=prompts,
        n_queries=config.n_queries,
        query_mode=config.query_mode,
        k=config.k,
        max_tokens=config.max_tokens,
    )
    if fixed_clock:
        deps.clock = _counter_clock()

    _check_overwrite(run_dir, force)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)

    reports: list[NoteReport] = []
    if config.workers == 1:
        for note in notes:
            report = evaluate_note(note, deps)
            reports.append(report)
            if not report.done and not keep_going:
                break
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(evaluate_note, note, deps) for note in notes]
            for position, future in enumerate(futures):
                report = future.result()
                reports.append(report)
                if not report.done and not keep_going:
                    # Stop handing out work; anything already running finishes
                    # but is not recorded.
                    for pending in futures[position + 1 :]:
                        pending.cancel()
                    break

    note_refs = []
    for report in reports:
        stem = _safe_filename(report.note_id)
        (run_dir / f"{stem}.json").write_text(emit_json(report.to_dict()), encoding="utf-8")
        note_refs.append(f"{stem}.json")
        if report.done:
            (run_dir / f"{stem}.dot").write_text(emit_dot(report), encoding="utf-8")

    rows = aggregate_specialty([r for r in reports if r.done])
    (run_dir / "table.csv").write_text(emit_table(rows, "csv"), encoding="utf-8")

    run_report = RunReport(
        run_id=run_id or run_dir.name,
        config={
            "embedder": embedder.identity(),
            "llm_model": config.llm_model if mock_path is None else "mock",
            "n_queries": config.n_queries,
            "query_mode": config.query_mode,
            "k": config.k,
            "workers": config.workers,
        },
        note_refs=note_refs,
        rows=rows,
        generated_at=timestamp or _now_iso(),
    )
    (run_dir / "run.json").write_text(emit_json(run_report.to_dict()), encoding="utf-8")

    failed = [r for r in reports if not r.done]
    skipped = len(notes) - len(reports)
    exit_code = EXIT_OK if not failed and not skipped else EXIT_EVAL_FAILURES
    return reports, rows, exit_code


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if args.workers is not None:
        config.workers = args.workers
    if args.k is not None:
        config.k = args.k
    if args.queries is not None:
        config.n_queries = args.queries
    config.validate()

    run_id = args.run_id or datetime.datetime.now(datetime.timezone.utc).strftime(
        "run-%Y%m%d-%H%M%S"
    )
    run_dir = Path(args.runs_root) / run_id
    reports, rows, exit_code = run_eval(
        Path(args.notes),
        Path(args.index),
        Path(args.chunks),
        run_dir,
        config,
        mock_path=Path(args.mock) if args.mock else None,
        keep_going=args.keep_going,
        force=args.force,
        run_id=run_id,
        timestamp=args.timestamp,
        fixed_clock=args.fixed_clock,
    )

    print(emit_table(rows, "text"), end="")
    failed = [r for r in reports if not r.done]
    for report in failed:
        print(f"FAILED {report.note_id} at {report.failed_stage}: {report.error}")
    evaluated = len(reports)
    print(f"evaluated {evaluated} note(s), {len(failed)} failed; run directory: {run_dir}")
    return exit_code


# ---------------------------------------------------------------------------
# report


def _load_run_report(run_dir: Path) -> RunReport:
    payload = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    rows = [
        SpecialtyRow(
            specialty=row["specialty"],
            mean_followed=row["mean_followed"],
            mean_not_followed=row["mean_not_followed"],
            score=row["score"],
            note_count=row["note_count"],
        )
        for row in payload["specialties"]
    ]
    return RunReport(
        run_id=payload["run_id"],
        config=payload["config"],
        note_refs=payload["note_reports"],
        rows=rows,
        generated_at=payload["generated_at"],
    )


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "run.json").is_file():
        raise FileNotFoundError(f"{run_dir} does not contain a run.json")
    run_report = _load_run_report(run_dir)
    notes = []
    for ref in run_report.note_refs:
        payload = json.loads((run_dir / ref).read_text(encoding="utf-8"))
        notes.append(scored_note_from_dict(payload))
    rederive_rows(run_report, notes)
    print(emit_table(run_report.rows, args.format), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def _compare_trees(produced: Path, golden: Path) -> list[str]:
    """Byte-compare two directories; returns human-readable differences."""
    produced_files = {p.relative_to(produced).as_posix() for p in produced.rglob("*") if p.is_file()}
    golden_files = {p.relative_to(golden).as_posix() for p in golden.rglob("*") if p.is_file()}
    problems = []
    for name in sorted(golden_files - produced_files):
        problems.append(f"missing from run output: {name}")
    for name in sorted(produced_files - golden_files):
        problems.append(f"unexpected run output: {name}")
    for name in sorted(produced_files & golden_files):
        if (produced / name).read_bytes() != (golden / name).read_bytes():
            problems.append(f"content differs: {name}")
    return problems


def run_selftest(fixtures_dir: Path) -> int:
    for required in ("corpus.jsonl", "notes.jsonl", "transcript.jsonl"):
        if not (fixtures_dir / required).is_file():
            raise FileNotFoundError(f"fixture {fixtures_dir / required} is missing")
    golden_dir = fixtures_dir / "goldens"
    if not golden_dir.is_dir():
        raise FileNotFoundError(f"golden directory {golden_dir} is missing")

    config = Config()
    config.llm_backend = "mock"
    with tempfile.TemporaryDirectory(prefix="gg-selftest-") as scratch_name:
        scratch = Path(scratch_name)
        chunks_path = scratch / "chunks.jsonl"
        index_path = scratch / "index.ggix"
        run_dir = scratch / "runs" / SELFTEST_RUN_ID

        run_ingest(fixtures_dir / "corpus.jsonl", chunks_path, config, force=False)
        run_index(chunks_path, index_path, config, force=False, timestamp=SELFTEST_TIMESTAMP)
        reports, rows, exit_code = run_eval(
            fixtures_dir / "notes.jsonl",
            index_path,
            chunks_path,
            run_dir,
            config,
            mock_path=fixtures_dir / "transcript.jsonl",
            run_id=SELFTEST_RUN_ID,
            timestamp=SELFTEST_TIMESTAMP,
            fixed_clock=True,
        )
        print(emit_table(rows, "text"), end="")
        if exit_code != EXIT_OK:
            for report in reports:
                if not report.done:
                    print(f"FAILED {report.note_id} at {report.failed_stage}: {report.error}")
            _fail("selftest pipeline run reported failures")
            return EXIT_EVAL_FAILURES

        problems = _compare_trees(run_dir, golden_dir)
    if problems:
        for problem in problems:
            print(f"golden mismatch: {problem}", file=sys.stderr)
        return EXIT_EVAL_FAILURES
    print("selftest ok: run output matches the checked-in goldens")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    fixtures_dir = Path(args.fixtures) if args.fixtures else FIXTURES_DIR
    if not fixtures_dir.is_dir():
        raise FileNotFoundError(f"fixtures directory {fixtures_dir} does not exist")
    return run_selftest(fixtures_dir)


# ---------------------------------------------------------------------------
# wiring


def _config_from_args(args: argparse.Namespace) -> Config:
    config = load_config(args.config)
    if getattr(args, "strict", False):
        config.strict = True
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gg",
        description="Score medical notes for healthcare-guideline adherence.",
    )
    parser.add_argument("--version", action="version", version=f"gg {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="TOML config file")

    ingest = subparsers.add_parser("ingest", help="chunk a guideline corpus")
    common(ingest)
    ingest.add_argument("corpus", help="corpus JSONL file")
    ingest.add_argument("-o", "--out", required=True, help="chunk store output path")
    ingest.add_argument("--force", action="store_true", help="overwrite existing output")
    ingest.add_argument("--strict", action="store_true",
                        help="abort on malformed corpus lines (the default unless the "
                             "config file relaxes it)")
    ingest.add_argument("--id-key", help="JSON key holding the document id")
    ingest.add_argument("--source-key", help="JSON key holding the source organisation")
    ingest.add_argument("--title-key", help="JSON key holding the title")
    ingest.add_argument("--text-key", help="JSON key holding the body text")
    ingest.set_defaults(func=cmd_ingest)

    index = subparsers.add_parser("index", help="embed chunks and build the vector index")
    common(index)
    index.add_argument("chunks", help="chunk store JSONL file")
    index.add_argument("-o", "--out", required=True, help="index output path")
    index.add_argument("--force", action="store_true", help="overwrite existing output")
    index.add_argument("--timestamp", help="build timestamp to stamp into the index "
                                           "(default: now; pin for reproducible bytes)")
    index.set_defaults(func=cmd_index)

    evaluate = subparsers.add_parser("eval", help="run the evaluation pipeline over notes")
    common(evaluate)
    evaluate.add_argument("notes", help="notes JSONL file")
    evaluate.add_argument("--index", required=True, help="vector index file")
    evaluate.add_argument("--chunks", required=True, help="chunk store JSONL file")
    evaluate.add_argument("--runs-root", default="runs", help="directory collecting runs")
    evaluate.add_argument("--run-id", help="run directory name (default: timestamp-derived)")
    evaluate.add_argument("--mock", help="mock transcript JSONL; forces the mock LLM backend")
    evaluate.add_argument("--workers", type=int, help="concurrent note evaluations")
    evaluate.add_argument("--k", type=int, help="retrieved chunks per query")
    evaluate.add_argument("--queries", type=int, help="queries per note")
    evaluate.add_argument("--keep-going", action="store_true",
                          help="evaluate remaining notes after a failure")
    evaluate.add_argument("--force", action="store_true", help="overwrite an existing run dir")
    evaluate.add_argument("--timestamp", help="report timestamp (default: now)")
    evaluate.add_argument("--fixed-clock", action="store_true",
                          help="use a deterministic stage clock (for golden runs)")
    evaluate.set_defaults(func=cmd_eval)

    report = subparsers.add_parser("report", help="re-render and verify a run directory")
    report.add_argument("run_dir", help="run directory produced by eval")
    report.add_argument("--format", choices=("csv", "text"), default="text")
    report.set_defaults(func=cmd_report)

    selftest = subparsers.add_parser("selftest", help="offline end-to-end check against goldens")
    selftest.add_argument("--fixtures", help="override the bundled fixture directory")
    selftest.set_defaults(func=cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except ConfigError as exc:
        _fail(str(exc))
        return EXIT_USAGE
    except DimensionMismatchError as exc:
        _fail(str(exc))
        return EXIT_USAGE
    except (
        CorpusError,
        IndexFormatError,
        TranscriptError,
        ReportError,
        EmbeddingError,
        LlmError,
        TransportError,
        OSError,
    ) as exc:
        _fail(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
