"""Tests for tallies, the adherence score, and specialty aggregation."""

from __future__ import annotations

import random
from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidegauge.scoring import (
    JudgmentStatus,
    NoteScore,
    SpecialtyRow,
    aggregate_specialty,
    compute_score,
    score_judgments,
    tally,
)


@dataclass(frozen=True)
class _J:
    status: JudgmentStatus


@dataclass(frozen=True)
class _Report:
    specialty: str
    score: NoteScore


F = _J(JudgmentStatus.FOLLOWED)
N = _J(JudgmentStatus.NOT_FOLLOWED)
M = _J(JudgmentStatus.MISSING_TREATMENT)


# ---------------------------------------------------------------------------
# tally


class TestTally:
    def test_direct_count(self):
        assert tally([F, F, N]) == (2, 1)

    def test_missing_treatment_counts_against(self):
        assert tally([M]) == (0, 1)

    def test_empty(self):
        assert tally([]) == (0, 0)

    def test_mixed(self):
        assert tally([F, M, N, M, F, F]) == (3, 3)


# ---------------------------------------------------------------------------
# compute_score


# (followed, not followed, published two-decimal score) rows that the
# ratio formula reproduces exactly.
CONSISTENT_ROWS = [
    ("Family Medicine", 1.5, 0.5, 0.75),
    ("Pediatrics", 1.0, 1.0, 0.50),
    ("Cardiology", 1.0, 0.5, 0.67),
    ("Oncology", 1.0, 0.5, 0.67),
    ("Endocrinology", 2.0, 0.5, 0.80),
    ("Pulmonology", 1.5, 2.0, 0.43),
    ("Orthopedics", 1.0, 1.0, 0.50),
]


class TestComputeScore:
    @pytest.mark.parametrize("specialty,f,n,expected", CONSISTENT_ROWS)
    def test_published_rows(self, specialty, f, n, expected):
        assert compute_score(f, n) == pytest.approx(expected, abs=0.005)

    def test_pulmonology_value(self):
        assert compute_score(1.5, 2.0) == pytest.approx(0.4286, abs=5e-5)

    def test_empty_note_is_none(self):
        assert compute_score(0, 0) is None

    def test_endocrinology(self):
        assert compute_score(2.0, 0.5) == pytest.approx(0.80, abs=1e-12)

    def test_gastroenterology_row_is_inconsistent(self):
        # The published table prints 0.17 for tallies (2.5, 1.0), which the
        # ratio formula cannot produce; it gives ~0.71. Documented as a
        # presumed typo; this pin makes the discrepancy loud if anything
        # changes.
        value = compute_score(2.5, 1.0)
        assert value == pytest.approx(5 / 7, abs=1e-12)
        assert abs(value - 0.17) > 0.5

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            compute_score(-1, 0)

    def test_bounds_and_extremes(self):
        assert compute_score(3, 0) == 1.0
        assert compute_score(0, 3) == 0.0


@settings(max_examples=300, deadline=None)
@given(f=st.integers(min_value=0, max_value=50), n=st.integers(min_value=0, max_value=50))
def test_score_bounds(f, n):
    score = compute_score(f, n)
    if f + n == 0:
        assert score is None
    else:
        assert 0.0 <= score <= 1.0
        assert (score == 1.0) == (n == 0 and f > 0)
        assert (score == 0.0) == (f == 0 and n > 0)


@settings(max_examples=200, deadline=None)
@given(
    statuses=st.lists(
        st.sampled_from([JudgmentStatus.FOLLOWED, JudgmentStatus.NOT_FOLLOWED,
                         JudgmentStatus.MISSING_TREATMENT]),
        max_size=20,
    ),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_tally_permutation_invariant(statuses, seed):
    judgments = [_J(s) for s in statuses]
    shuffled = judgments[:]
    random.Random(seed).shuffle(shuffled)
    assert tally(judgments) == tally(shuffled)


def test_score_judgments_bundles_tally():
    score = score_judgments([F, N, M])
    assert score == NoteScore(followed=1, not_followed=2, score=pytest.approx(1 / 3))
    assert score.judged == 3


# ---------------------------------------------------------------------------
# aggregate_specialty


def _note(specialty: str, f: int, n: int) -> _Report:
    return _Report(specialty, NoteScore(f, n, compute_score(f, n)))


class TestAggregate:
    def test_family_medicine_shape(self):
        rows = aggregate_specialty([_note("Family Medicine", 2, 1), _note("Family Medicine", 1, 0)])
        assert rows == [
            SpecialtyRow(
                specialty="Family Medicine",
                mean_followed=1.5,
                mean_not_followed=0.5,
                score=0.75,
                note_count=2,
            )
        ]

    def test_single_note(self):
        (row,) = aggregate_specialty([_note("Pediatrics", 1, 1)])
        assert (row.mean_followed, row.mean_not_followed, row.score) == (1.0, 1.0, 0.50)

    def test_no_reports_no_rows(self):
        assert aggregate_specialty([]) == []

    def test_all_empty_notes_score_none(self):
        (row,) = aggregate_specialty([_note("Radiology", 0, 0), _note("Radiology", 0, 0)])
        assert row.score is None
        assert row.mean_followed == 0.0
        assert row.note_count == 2

    def test_first_appearance_order(self):
        rows = aggregate_specialty(
            [_note("B", 1, 0), _note("A", 1, 0), _note("B", 0, 1)]
        )
        assert [r.specialty for r in rows] == ["B", "A"]

    def test_permutation_invariant_per_specialty(self):
        notes = [_note("X", 2, 1), _note("X", 0, 3), _note("X", 4, 0)]
        (a,) = aggregate_specialty(notes)
        (b,) = aggregate_specialty(list(reversed(notes)))
        assert (a.mean_followed, a.mean_not_followed, a.score) == (
            b.mean_followed,
            b.mean_not_followed,
            b.score,
        )


@settings(max_examples=200, deadline=None)
@given(
    tallies=st.lists(
        st.tuples(st.integers(min_value=0, max_value=9), st.integers(min_value=0, max_value=9)),
        min_size=1,
        max_size=12,
    )
)
def test_ratio_of_sums_equals_ratio_of_means(tallies):
    notes = [_note("S", f, n) for f, n in tallies]
    (row,) = aggregate_specialty(notes)
    total_f = sum(f for f, _ in tallies)
    total_n = sum(n for _, n in tallies)
    expected = compute_score(total_f, total_n)
    from_means = compute_score(row.mean_followed, row.mean_not_followed)
    if expected is None:
        assert row.score is None and from_means is None
    else:
        assert row.score == pytest.approx(expected, rel=1e-12)
        assert from_means == pytest.approx(expected, rel=1e-12)
