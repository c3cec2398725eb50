"""Adherence tallies and score arithmetic.

Each judged diagnosis counts once: guideline-conformant treatment
increments the followed tally, a non-conformant treatment or a diagnosis
documented with no treatment at all increments the not-followed tally.
The note score is followed / (followed + not-followed), in [0, 1], and is
None (not 0) when a note produced nothing to judge. Specialty rows carry
the per-note means; the row score comes from the summed tallies, which
equals the ratio of the means.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Protocol


class JudgmentStatus(str, Enum):
    FOLLOWED = "Followed"
    NOT_FOLLOWED = "NotFollowed"
    MISSING_TREATMENT = "MissingTreatment"


@dataclass(frozen=True)
class NoteScore:
    followed: int
    not_followed: int
    score: float | None

    @property
    def judged(self) -> int:
        return self.followed + self.not_followed


@dataclass(frozen=True)
class SpecialtyRow:
    specialty: str
    mean_followed: float
    mean_not_followed: float
    score: float | None
    note_count: int


class _HasStatus(Protocol):
    status: JudgmentStatus


class _ScoredReport(Protocol):
    specialty: str
    score: NoteScore


def tally(judgments: Iterable[_HasStatus]) -> tuple[int, int]:
    """Count (followed, not_followed); missing treatment counts as not followed."""
    followed = 0
    not_followed = 0
    for judgment in judgments:
        if judgment.status is JudgmentStatus.FOLLOWED:
            followed += 1
        else:
            not_followed += 1
    return followed, not_followed


def compute_score(followed: float, not_followed: float) -> float | None:
    """followed / (followed + not_followed), or None when nothing was judged."""
    if followed < 0 or not_followed < 0:
        raise ValueError("tallies must be non-negative")
    total = followed + not_followed
    if total == 0:
        return None
    return followed / total


def score_judgments(judgments: Iterable[_HasStatus]) -> NoteScore:
    followed, not_followed = tally(judgments)
    return NoteScore(followed, not_followed, compute_score(followed, not_followed))


def aggregate_specialty(reports: Iterable[_ScoredReport]) -> list[SpecialtyRow]:
    """One row per specialty, in first-appearance order.

    Row score is computed from the summed tallies rather than by averaging
    per-note scores, so a specialty where every note was empty gets a None
    score instead of a fabricated number.
    """
    groups: dict[str, list[NoteScore]] = {}
    for report in reports:
        groups.setdefault(report.specialty, []).append(report.score)
    rows = []
    for specialty, scores in groups.items():
        count = len(scores)
        total_followed = sum(s.followed for s in scores)
        total_not = sum(s.not_followed for s in scores)
        rows.append(
            SpecialtyRow(
                specialty=specialty,
                mean_followed=total_followed / count,
                mean_not_followed=total_not / count,
                score=compute_score(total_followed, total_not),
                note_count=count,
            )
        )
    return rows
