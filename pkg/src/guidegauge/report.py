"""Render note evaluations as JSON documents, Table-shaped CSV/text, and
Graphviz DOT adherence graphs.

Every emitter is a pure function of its inputs: timestamps are injected by
the caller, keys are sorted, and node order follows finding order, so
identical runs serialize to identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .pipeline import NoteReport
from .scoring import JudgmentStatus, NoteScore, SpecialtyRow, aggregate_specialty

SCHEMA_VERSION = 1

STATUS_COLORS = {
    JudgmentStatus.FOLLOWED: "green",
    JudgmentStatus.NOT_FOLLOWED: "red",
    JudgmentStatus.MISSING_TREATMENT: "orange",
}

TABLE_HEADER = ("Specialty", "Followed", "Not followed", "Score")


class ReportError(Exception):
    """Asked to render something that is not renderable."""


@dataclass
class RunReport:
    """Batch-level summary: config snapshot, per-note refs, specialty rows."""

    run_id: str
    config: dict
    note_refs: list[str]
    rows: list[SpecialtyRow]
    generated_at: str

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "config": self.config,
            "note_reports": list(self.note_refs),
            "specialties": [
                {
                    "specialty": row.specialty,
                    "mean_followed": row.mean_followed,
                    "mean_not_followed": row.mean_not_followed,
                    "score": row.score,
                    "note_count": row.note_count,
                }
                for row in self.rows
            ],
            "generated_at": self.generated_at,
        }


def emit_json(payload: dict) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _quote(label: str) -> str:
    escaped = label.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def emit_dot(report: NoteReport) -> str:
    """Adherence graph: note -> diagnoses -> treatments, plus cited chunks.

    Diagnosis nodes are filled green (followed), red (not followed) or
    orange (missing treatment); cited guideline chunks hang off their
    diagnosis as "source:doc_id#chunk" leaves.
    """
    if not report.done:
        raise ReportError(f"cannot render a {report.status.value} report as a graph")
    if len(report.judgments) != len(report.findings):
        raise ReportError("report has mismatched findings and judgments")

    source_by_ref = {}
    if report.evidence is not None:
        for entry in report.evidence.per_query:
            for hit in entry.hits:
                source_by_ref[hit.ref] = hit.source

    lines = ["digraph adherence {", "  rankdir=TB;", '  node [shape=box, style=filled, fillcolor=white];']
    lines.append(f'  root [label={_quote("note " + report.note_id)}, shape=ellipse, fillcolor=lightblue];')

    for i, finding in enumerate(report.findings):
        judgment = report.judgments[i]
        color = STATUS_COLORS[judgment.status]
        dx = f"dx{i}"
        lines.append(f"  {dx} [label={_quote(finding.diagnosis)}, fillcolor={color}];")
        lines.append(f"  root -> {dx};")
        for t, treatment in enumerate(finding.treatments):
            node = f"dx{i}_tx{t}"
            lines.append(f"  {node} [label={_quote(treatment)}];")
            lines.append(f"  {dx} -> {node};")
        for c, ref in enumerate(judgment.cited_chunks):
            node = f"dx{i}_ev{c}"
            source = source_by_ref.get(ref, "?")
            label = f"{source}:{ref[0]}#{ref[1]}"
            lines.append(f"  {node} [label={_quote(label)}, shape=note, fillcolor=lightyellow];")
            lines.append(f"  {dx} -> {node};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _format_score(score: float | None) -> str:
    return "n/a" if score is None else f"{score:.2f}"


def emit_table(rows: list[SpecialtyRow], fmt: str = "csv") -> str:
    """Specialty/Followed/Not followed/Score table as CSV or aligned text."""
    cells = [
        (row.specialty, f"{row.mean_followed:.2f}", f"{row.mean_not_followed:.2f}", _format_score(row.score))
        for row in rows
    ]
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        writer.writerows(cells)
        return buffer.getvalue()
    if fmt == "text":
        table = [TABLE_HEADER, *cells]
        widths = [max(len(row[col]) for row in table) for col in range(len(TABLE_HEADER))]
        out = []
        for row in table:
            first = row[0].ljust(widths[0])
            rest = [value.rjust(width) for value, width in zip(row[1:], widths[1:])]
            out.append("  ".join([first, *rest]).rstrip())
        return "\n".join(out) + "\n"
    raise ReportError(f"unknown table format {fmt!r}")


@dataclass(frozen=True)
class ScoredNote:
    """The slice of a persisted note report that aggregation needs."""

    specialty: str
    score: NoteScore | None
    done: bool


def scored_note_from_dict(payload: dict) -> ScoredNote:
    """Rehydrate the aggregation-relevant fields of a note report JSON."""
    raw_score = payload.get("score")
    score = None
    if raw_score is not None:
        score = NoteScore(
            followed=raw_score["followed"],
            not_followed=raw_score["not_followed"],
            score=raw_score["score"],
        )
    return ScoredNote(
        specialty=payload["specialty"],
        score=score,
        done=payload["status"] == "done",
    )


def rederive_rows(run: RunReport, notes: list[ScoredNote]) -> list[SpecialtyRow]:
    """Recompute the specialty rows from the note reports and compare.

    Raises ReportError if the stored rows cannot be reproduced, which
    means the run directory was edited or mixes runs.
    """
    derived = aggregate_specialty([n for n in notes if n.done])
    if derived != run.rows:
        raise ReportError(
            "specialty rows do not re-derive from the note reports: "
            f"stored {run.rows!r}, derived {derived!r}"
        )
    return derived
