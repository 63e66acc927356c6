"""From a loaded cohort to per-window feature tables.

Two window sources exist: ``clinical`` (consecutive clinician visits) and
``augmented`` (clinician timelines merged with accepted self reports,
targets at least a horizon away).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import pandas as pd

from .augment import (
    ALPHA,
    HORIZON_MIN_DAYS,
    MergeDecision,
    TimelinePoint,
    horizon_windows,
    merge_decisions,
    merged_visits,
)
from .core import CLINICIAN, QUESTIONS, SELF, ConfigError
from .featurize import build_feature_table
from .ingest import Cohort, StaticSchema
from .sync import TAIL_MAX_GAP_DAYS, AlignedPatient, ObservationWindow, align, build_windows

DATA_SOURCES = ("clinical", "augmented")


@dataclass(frozen=True)
class WindowSettings:
    tail_max_gap_days: int = TAIL_MAX_GAP_DAYS
    horizon_min_days: int = HORIZON_MIN_DAYS
    augment_alpha: float = ALPHA


@dataclass
class WindowSet:
    source: str
    windows: list[ObservationWindow]
    aligned: list[AlignedPatient]
    decisions: list[MergeDecision] = field(default_factory=list)


def align_cohort(cohort: Cohort, settings: WindowSettings = WindowSettings()) -> list[AlignedPatient]:
    clin = cohort.visits_by_patient(CLINICIAN)
    sensors = cohort.sensors_by_patient()
    return [
        align(pid, clin.get(pid, []), sensors.get(pid, []), settings.tail_max_gap_days)
        for pid in cohort.patient_ids
    ]


def clinical_windows(cohort: Cohort, settings: WindowSettings = WindowSettings()) -> WindowSet:
    aligned = align_cohort(cohort, settings)
    windows = [w for p in aligned for w in build_windows(p)]
    return WindowSet("clinical", windows, aligned)


def augmented_windows(
    cohort: Cohort,
    settings: WindowSettings = WindowSettings(),
    decisions: Optional[Sequence[MergeDecision]] = None,
) -> WindowSet:
    """Windows on merged timelines.

    ``decisions`` may come from a persisted decision table; otherwise they
    are computed from the cohort.
    """
    clin = cohort.visits_by_patient(CLINICIAN)
    selfv = cohort.visits_by_patient(SELF)
    sensors = cohort.sensors_by_patient()
    if decisions is None:
        decisions = merge_decisions(clin, selfv, settings.augment_alpha)
    accepted: dict[str, dict[int, bool]] = {}
    for d in decisions:
        accepted.setdefault(d.patient_id, {})[d.question] = d.merged
    aligned, windows = [], []
    for pid in cohort.patient_ids:
        visits = merged_visits(clin.get(pid, []), selfv.get(pid, []), accepted.get(pid, {})) if (
            clin.get(pid) or selfv.get(pid)
        ) else []
        ap = align(pid, visits, sensors.get(pid, []), settings.tail_max_gap_days)
        aligned.append(ap)
        if not ap.usable:
            continue
        for q in QUESTIONS:
            timeline = [
                TimelinePoint(v.day, v.score(q), v.source) for v in ap.visits if v.score(q) is not None
            ]
            windows.extend(horizon_windows(pid, q, timeline, settings.horizon_min_days))
    return WindowSet("augmented", windows, aligned, list(decisions))


def window_set(
    cohort: Cohort,
    source: str,
    settings: WindowSettings = WindowSettings(),
    decisions: Optional[Sequence[MergeDecision]] = None,
) -> WindowSet:
    if source == "clinical":
        return clinical_windows(cohort, settings)
    if source == "augmented":
        return augmented_windows(cohort, settings, decisions)
    raise ConfigError(f"unknown data source {source!r}")


def feature_table(
    cohort: Cohort,
    windows: Sequence[ObservationWindow],
    aligned: Sequence[AlignedPatient],
    schema: StaticSchema,
    channels: Sequence[str],
    mode: str,
) -> pd.DataFrame:
    """Feature rows for ``windows`` using the aligned (truncated) sensor series."""
    sensors = {p.patient_id: p.sensors for p in aligned}
    return build_feature_table(
        windows, sensors, cohort.static_by_patient(), schema, channels, mode
    )
