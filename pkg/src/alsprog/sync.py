"""Alignment of clinical visits with sensor coverage and window construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import QUESTIONS, VisitRecord
from .ingest import SensorSeries

TAIL_MAX_GAP_DAYS = 60

PRE_SENSOR = "pre_sensor"
TAIL_GT_60D = "tail_gt_60d"
SINGLE_VISIT = "single_visit_patient"
NO_CLINICIAN_VISITS = "no_clinician_visits"


@dataclass(frozen=True)
class DroppedVisit:
    day: int
    reason: str


@dataclass
class AlignedPatient:
    patient_id: str
    visits: list[VisitRecord]
    sensors: list[SensorSeries]
    sensor_first_day: Optional[int]
    clinical_first_day: Optional[int]
    sensor_last_day: Optional[int]
    dropped_visits: list[DroppedVisit] = field(default_factory=list)
    excluded: Optional[str] = None

    @property
    def usable(self) -> bool:
        return self.excluded is None and len(self.visits) >= 2


@dataclass(frozen=True)
class ObservationWindow:
    patient_id: str
    question: int
    window_start: int
    window_end: int
    previous_value: int
    target_value: int
    followup_index: int
    target_source: str = "clinician"

    @property
    def delta_days(self) -> int:
        return self.window_end - self.window_start

    @property
    def days_since_diagnosis(self) -> int:
        return self.window_start


def _sensor_span(sensors: Sequence[SensorSeries]) -> tuple[Optional[int], Optional[int]]:
    firsts = [int(s.days[0]) for s in sensors if s.days.size]
    lasts = [int(s.days[-1]) for s in sensors if s.days.size]
    if not firsts:
        return None, None
    return min(firsts), max(lasts)


def align(
    patient_id: str,
    visits: Sequence[VisitRecord],
    sensors: Sequence[SensorSeries],
    tail_max_gap_days: int = TAIL_MAX_GAP_DAYS,
) -> AlignedPatient:
    """Synchronize one patient's visits with their sensor coverage.

    Visits earlier than the last visit at or before the first sensor day
    are dropped; visits after the last sensor day are dropped except the
    first one, which survives if it lies within ``tail_max_gap_days``.
    Sensor samples after the last kept visit are cut. Patients left with
    fewer than two visits are marked excluded but keep their visit so
    that augmentation can still use it.

    Patients without any sensor samples keep all their visits.
    """
    visits = sorted(visits, key=lambda v: v.day)
    t1s, last_sensor = _sensor_span(sensors)
    dropped: list[DroppedVisit] = []
    if not visits:
        return AlignedPatient(
            patient_id, [], list(sensors), t1s, None, last_sensor, [], NO_CLINICIAN_VISITS
        )
    t1c = visits[0].day
    kept = list(visits)

    if t1s is not None and t1s > t1c:
        anchor = max(v.day for v in kept if v.day <= t1s)
        dropped += [DroppedVisit(v.day, PRE_SENSOR) for v in kept if v.day < anchor]
        kept = [v for v in kept if v.day >= anchor]

    if last_sensor is not None:
        tail = [v for v in kept if v.day > last_sensor]
        if tail:
            allow = tail[0].day - last_sensor <= tail_max_gap_days
            drop_from = 1 if allow else 0
            dropped += [DroppedVisit(v.day, TAIL_GT_60D) for v in tail[drop_from:]]
            kept = [v for v in kept if v.day <= last_sensor] + (tail[:1] if allow else [])

    excluded = None
    if len(kept) < 2:
        excluded = SINGLE_VISIT

    if kept:
        last_kept = kept[-1].day
        sensors = [s.truncated(last_kept) for s in sensors]
    sensors = sorted(sensors, key=lambda s: s.channel)
    return AlignedPatient(
        patient_id=patient_id,
        visits=kept,
        sensors=list(sensors),
        sensor_first_day=t1s,
        clinical_first_day=t1c,
        sensor_last_day=_sensor_span(sensors)[1],
        dropped_visits=sorted(dropped, key=lambda d: d.day),
        excluded=excluded,
    )


def audit_rows(patients: Iterable[AlignedPatient]) -> list[dict]:
    """Rows of the ``patient_id,day,action,reason`` audit table."""
    rows = []
    for p in sorted(patients, key=lambda p: p.patient_id):
        events = [(d.day, "drop", d.reason) for d in p.dropped_visits]
        if p.excluded == SINGLE_VISIT:
            events += [(v.day, "exclude", SINGLE_VISIT) for v in p.visits]
        elif p.excluded is not None:
            events.append((None, "exclude", p.excluded))
        else:
            events += [(v.day, "keep", "") for v in p.visits]
        events.sort(key=lambda e: (-1 if e[0] is None else e[0], e[1]))
        for day, action, reason in events:
            rows.append({"patient_id": p.patient_id, "day": day, "action": action, "reason": reason})
    return rows


def build_windows(aligned: AlignedPatient, questions: Sequence[int] = QUESTIONS) -> list[ObservationWindow]:
    """One window per consecutive visit pair and question with both scores present."""
    if not aligned.usable:
        return []
    out = []
    for q in questions:
        for k in range(1, len(aligned.visits)):
            prev, nxt = aligned.visits[k - 1], aligned.visits[k]
            a, b = prev.score(q), nxt.score(q)
            if a is None or b is None:
                continue
            out.append(
                ObservationWindow(
                    aligned.patient_id, q, prev.day, nxt.day, a, b, k, nxt.source
                )
            )
    return out


@dataclass(frozen=True)
class FollowupStat:
    followup_index: int
    question: int
    n: int
    mean: float
    ci_low: Optional[float]
    ci_high: Optional[float]


def cohort_followup_profile(
    patients: Sequence[AlignedPatient], questions: Sequence[int] = QUESTIONS
) -> tuple[list[int], list[FollowupStat]]:
    """Patient counts per visit index and per-question mean score with a 95% CI.

    Index 0 is each patient's first kept visit. The interval is
    ``mean +/- 1.96 sd / sqrt(n)`` (sample sd); it is None when n < 2.
    """
    if not patients:
        raise ValueError("need at least one aligned patient")
    max_len = max(len(p.visits) for p in patients)
    counts = [sum(1 for p in patients if len(p.visits) > k) for k in range(max_len)]
    stats = []
    for k in range(max_len):
        for q in questions:
            vals = [p.visits[k].score(q) for p in patients if len(p.visits) > k]
            vals = np.array([v for v in vals if v is not None], dtype=float)
            if vals.size == 0:
                continue
            mean = float(vals.mean())
            if vals.size < 2:
                lo = hi = None
            else:
                half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(vals.size)
                lo, hi = mean - half, mean + half
            stats.append(FollowupStat(k, q, int(vals.size), mean, lo, hi))
    return counts, stats
