"""Merging self-assessment scores into clinician timelines.

A (patient, question) pair is merged only when a chi-squared test does
not reject that both sources draw from the same score distribution.
Training targets on merged timelines are restricted to a minimum horizon
so that consecutive, closely spaced self reports do not dominate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import CLINICIAN, QUESTIONS, SELF, VisitRecord
from .stats import chi2_same_distribution
from .sync import ObservationWindow

log = logging.getLogger(__name__)

ALPHA = 0.05
HORIZON_MIN_DAYS = 90

MERGED = "merged"
REJECTED = "rejected_distribution"
UNTESTABLE = "untestable"


@dataclass(frozen=True)
class MergeDecision:
    patient_id: str
    question: int
    chi2_statistic: float
    dof: int
    p_value: float
    merged: bool
    reason: str
    min_expected: float = float("nan")

    def as_row(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "question": self.question,
            "stat": self.chi2_statistic,
            "dof": self.dof,
            "p": self.p_value,
            "merged": self.merged,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class TimelinePoint:
    day: int
    score: int
    source: str


def decide_merge(
    patient_id: str, question: int, clinician: Sequence[int], self_scores: Sequence[int], alpha: float = ALPHA
) -> MergeDecision:
    if len(clinician) == 0 or len(self_scores) == 0:
        return MergeDecision(patient_id, question, float("nan"), 0, float("nan"), False, UNTESTABLE)
    res = chi2_same_distribution(clinician, self_scores)
    if res.min_expected < 5:
        log.debug(
            "patient %s q%d: smallest expected count %.2f < 5", patient_id, question, res.min_expected
        )
    merged = res.p_value >= alpha
    return MergeDecision(
        patient_id,
        question,
        res.statistic,
        res.dof,
        res.p_value,
        merged,
        MERGED if merged else REJECTED,
        res.min_expected,
    )


def merge_decisions(
    clinician_visits: Mapping[str, Sequence[VisitRecord]],
    self_visits: Mapping[str, Sequence[VisitRecord]],
    alpha: float = ALPHA,
    questions: Sequence[int] = QUESTIONS,
) -> list[MergeDecision]:
    """One decision per (patient, question) for every patient with self reports."""
    out = []
    for pid in sorted(self_visits):
        cv = clinician_visits.get(pid, ())
        sv = self_visits[pid]
        for q in questions:
            c = [v.score(q) for v in cv if v.score(q) is not None]
            s = [v.score(q) for v in sv if v.score(q) is not None]
            out.append(decide_merge(pid, q, c, s, alpha))
    return out


def merge_pair(
    clinician: Sequence[VisitRecord],
    self_visits: Sequence[VisitRecord],
    question: int,
    merged: bool,
) -> list[TimelinePoint]:
    """Day-sorted timeline for one question; clinician scores win same-day clashes."""
    points = {v.day: TimelinePoint(v.day, v.score(question), CLINICIAN) for v in clinician if v.score(question) is not None}
    if merged:
        for v in self_visits:
            s = v.score(question)
            if s is not None and v.day not in points:
                points[v.day] = TimelinePoint(v.day, s, SELF)
    return [points[d] for d in sorted(points)]


def merged_visits(
    clinician: Sequence[VisitRecord],
    self_visits: Sequence[VisitRecord],
    decisions: Mapping[int, bool],
) -> list[VisitRecord]:
    """Fold per-question timelines back into one visit list per day.

    A day's visit carries every question whose timeline has a point on
    that day; its source is clinician if any clinician score is present.
    """
    by_day: dict[int, dict[int, TimelinePoint]] = {}
    pid = (clinician or self_visits)[0].patient_id
    for q in QUESTIONS:
        for pt in merge_pair(clinician, self_visits, q, decisions.get(q, False)):
            by_day.setdefault(pt.day, {})[q] = pt
    out = []
    for day in sorted(by_day):
        pts = by_day[day]
        src = CLINICIAN if any(p.source == CLINICIAN for p in pts.values()) else SELF
        out.append(VisitRecord(pid, day, src, {q: p.score for q, p in sorted(pts.items())}))
    return out


def horizon_windows(
    patient_id: str,
    question: int,
    timeline: Sequence[TimelinePoint],
    horizon_min_days: int = HORIZON_MIN_DAYS,
) -> list[ObservationWindow]:
    """Pair each anchor with the earliest later point at least ``horizon_min_days`` away."""
    pts = sorted(timeline, key=lambda p: p.day)
    out = []
    for i, a in enumerate(pts):
        for j in range(i + 1, len(pts)):
            b = pts[j]
            if b.day - a.day >= horizon_min_days:
                out.append(
                    ObservationWindow(patient_id, question, a.day, b.day, a.score, b.score, j, b.source)
                )
                break
    return out


def merge_summary(decisions: Sequence[MergeDecision]) -> dict:
    testable = [d for d in decisions if d.reason != UNTESTABLE]
    merged = sum(d.merged for d in testable)
    return {
        "pairs": len(decisions),
        "testable": len(testable),
        "merged": merged,
        "merge_rate": merged / len(testable) if testable else float("nan"),
        # pairs whose smallest expected cell count is under 5 (test still applied)
        "low_expected": sum(d.min_expected < 5 for d in testable),
    }
