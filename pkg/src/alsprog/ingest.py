"""Loading and validation of the static, visit and sensor tables."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .core import (
    CLINICIAN,
    QUESTIONS,
    SCORE_MAX,
    SCORE_MIN,
    SELF,
    DataValidationError,
    VisitRecord,
)
from .io import write_csv

log = logging.getLogger(__name__)

VISIT_COLUMNS = ["patient_id", "day", "source"] + [f"q{q}" for q in QUESTIONS]
SENSOR_COLUMNS = ["patient_id", "day", "channel", "value"]
MAX_REPORTED_ERRORS = 20


@dataclass(frozen=True)
class StaticRecord:
    patient_id: str
    numeric: Mapping[str, Optional[float]] = field(default_factory=dict)
    categorical: Mapping[str, Optional[str]] = field(default_factory=dict)


@dataclass(frozen=True)
class SensorSeries:
    patient_id: str
    channel: str
    days: np.ndarray
    values: np.ndarray

    def slice(self, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        """Samples with ``start <= day < end``."""
        lo = np.searchsorted(self.days, start, side="left")
        hi = np.searchsorted(self.days, end, side="left")
        return self.days[lo:hi], self.values[lo:hi]

    def truncated(self, last_day: int) -> "SensorSeries":
        hi = np.searchsorted(self.days, last_day, side="right")
        return replace(self, days=self.days[:hi], values=self.values[:hi])


@dataclass
class Cohort:
    static: list[StaticRecord]
    visits: list[VisitRecord]
    sensors: list[SensorSeries]

    @property
    def patient_ids(self) -> list[str]:
        ids = {r.patient_id for r in self.static}
        ids.update(v.patient_id for v in self.visits)
        return sorted(ids)

    @property
    def channels(self) -> list[str]:
        return sorted({s.channel for s in self.sensors})

    def visits_by_patient(self, source: Optional[str] = None) -> dict[str, list[VisitRecord]]:
        out: dict[str, list[VisitRecord]] = {}
        for v in self.visits:
            if source is None or v.source == source:
                out.setdefault(v.patient_id, []).append(v)
        for vs in out.values():
            vs.sort(key=lambda v: (v.day, v.source))
        return out

    def sensors_by_patient(self) -> dict[str, list[SensorSeries]]:
        out: dict[str, list[SensorSeries]] = {}
        for s in self.sensors:
            out.setdefault(s.patient_id, []).append(s)
        for ss in out.values():
            ss.sort(key=lambda s: s.channel)
        return out

    def static_by_patient(self) -> dict[str, StaticRecord]:
        return {r.patient_id: r for r in self.static}

    def subset(self, patient_ids) -> "Cohort":
        keep = set(patient_ids)
        return Cohort(
            static=[r for r in self.static if r.patient_id in keep],
            visits=[v for v in self.visits if v.patient_id in keep],
            sensors=[s for s in self.sensors if s.patient_id in keep],
        )


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataValidationError("file not found", path=path)
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"cannot parse CSV ({exc})", path=path) from exc


def _raise_collected(errors: list[str], path) -> None:
    if not errors:
        return
    shown = errors[:MAX_REPORTED_ERRORS]
    more = len(errors) - len(shown)
    msg = "; ".join(shown) + (f"; ... {more} more" if more > 0 else "")
    raise DataValidationError(msg, path=path)


def _parse_float(text: str) -> Optional[float]:
    if text.strip() == "":
        return None
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def _parse_day(text: str) -> int:
    v = float(text)
    if not v.is_integer() or v < 0:
        raise ValueError(f"day must be a non-negative integer, got {text!r}")
    return int(v)


def load_static(path) -> list[StaticRecord]:
    """Read ``static.csv``; columns whose non-empty cells all parse as numbers are numeric."""
    df = _read_table(path)
    if "patient_id" not in df.columns:
        raise DataValidationError("missing required column 'patient_id'", path=path)
    errors = []
    dup = df["patient_id"][df["patient_id"].duplicated()]
    for idx in dup.index:
        errors.append(f"row {idx + 2}: duplicate patient_id {df.at[idx, 'patient_id']!r}")
    for idx in df.index[df["patient_id"].str.strip() == ""]:
        errors.append(f"row {idx + 2}: empty patient_id")
    _raise_collected(errors, path)

    fields = [c for c in df.columns if c != "patient_id"]
    numeric_fields = []
    for c in fields:
        try:
            [_parse_float(x) for x in df[c]]
            numeric_fields.append(c)
        except ValueError:
            pass
    records = []
    for _, row in df.iterrows():
        num = {c: _parse_float(row[c]) for c in numeric_fields}
        cat = {
            c: (row[c].strip() or None) for c in fields if c not in numeric_fields
        }
        records.append(StaticRecord(row["patient_id"].strip(), num, cat))
    return records


def load_visits(path) -> list[VisitRecord]:
    df = _read_table(path)
    unknown = [c for c in df.columns if c not in VISIT_COLUMNS]
    missing = [c for c in VISIT_COLUMNS if c not in df.columns]
    if unknown or missing:
        raise DataValidationError(
            f"visit header mismatch (unknown={unknown}, missing={missing})", path=path
        )
    errors = []
    visits = []
    seen = set()
    for idx, row in df.iterrows():
        rowno = idx + 2
        try:
            pid = row["patient_id"].strip()
            if not pid:
                raise ValueError("empty patient_id")
            day = _parse_day(row["day"])
            source = row["source"].strip()
            if source not in (CLINICIAN, SELF):
                raise ValueError(f"source must be clinician or self, got {source!r}")
            scores = {}
            for q in QUESTIONS:
                cell = row[f"q{q}"].strip()
                if cell == "":
                    continue
                v = float(cell)
                if not v.is_integer() or not SCORE_MIN <= v <= SCORE_MAX:
                    raise ValueError(f"q{q} score {cell!r} outside {{0..4}}")
                scores[q] = int(v)
            if not scores:
                raise ValueError("no scores present")
            key = (pid, day, source)
            if key in seen:
                raise ValueError(f"duplicate visit for patient {pid!r} day {day} source {source}")
            seen.add(key)
            visits.append(VisitRecord(pid, day, source, scores))
        except ValueError as exc:
            errors.append(f"row {rowno}: {exc}")
    _raise_collected(errors, path)
    visits.sort(key=lambda v: (v.patient_id, v.day, v.source))
    return visits


def load_sensors(path) -> list[SensorSeries]:
    df = _read_table(path)
    if list(df.columns) != SENSOR_COLUMNS and sorted(df.columns) != sorted(SENSOR_COLUMNS):
        raise DataValidationError(
            f"sensor header must be {','.join(SENSOR_COLUMNS)}, got {','.join(df.columns)}",
            path=path,
        )
    errors = []
    day = pd.to_numeric(df["day"], errors="coerce")
    value = pd.to_numeric(df["value"], errors="coerce")
    bad_day = day.isna() | (day < 0) | (day != np.floor(day))
    bad_value = value.isna() | ~np.isfinite(value.fillna(0.0))
    bad_id = (df["patient_id"].str.strip() == "") | (df["channel"].str.strip() == "")
    for idx in df.index[bad_day | bad_value | bad_id]:
        errors.append(
            f"row {idx + 2}: invalid sensor sample "
            f"(patient_id={df.at[idx, 'patient_id']!r}, day={df.at[idx, 'day']!r}, "
            f"channel={df.at[idx, 'channel']!r}, value={df.at[idx, 'value']!r})"
        )
    _raise_collected(errors, path)

    tidy = pd.DataFrame(
        {
            "patient_id": df["patient_id"].str.strip(),
            "channel": df["channel"].str.strip(),
            "day": day.astype(np.int64),
            "value": value.astype(float),
            "order": np.arange(len(df)),
        }
    )
    dup = tidy.duplicated(["patient_id", "channel", "day"], keep="last")
    if dup.any():
        log.warning("%s: %d duplicate sensor samples dropped (last occurrence kept)", path, int(dup.sum()))
        tidy = tidy[~dup]
    tidy = tidy.sort_values(["patient_id", "channel", "day"], kind="mergesort")
    series = []
    for (pid, ch), g in tidy.groupby(["patient_id", "channel"], sort=True):
        series.append(
            SensorSeries(pid, ch, g["day"].to_numpy(np.int64), g["value"].to_numpy(float))
        )
    return series


def load_cohort(static_path, visits_path, sensors_path) -> Cohort:
    return Cohort(
        static=load_static(static_path),
        visits=load_visits(visits_path),
        sensors=load_sensors(sensors_path),
    )


def load_cohort_dir(directory) -> Cohort:
    d = Path(directory)
    return load_cohort(d / "static.csv", d / "visits.csv", d / "sensors.csv")


@dataclass(frozen=True)
class StaticSchema:
    """Imputation values and one-hot label sets learned from a reference cohort."""

    numeric_medians: Mapping[str, float]
    categorical_modes: Mapping[str, str]
    categorical_labels: Mapping[str, Sequence[str]]

    def to_dict(self) -> dict:
        return {
            "numeric_medians": dict(self.numeric_medians),
            "categorical_modes": dict(self.categorical_modes),
            "categorical_labels": {k: list(v) for k, v in self.categorical_labels.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StaticSchema":
        return cls(d["numeric_medians"], d["categorical_modes"], d["categorical_labels"])

    @property
    def columns(self) -> list[str]:
        cols = sorted(self.numeric_medians)
        for name in sorted(self.categorical_labels):
            cols.extend(f"{name}={lab}" for lab in self.categorical_labels[name])
        return cols


def fit_static_schema(records: Sequence[StaticRecord]) -> StaticSchema:
    numeric_fields = sorted({k for r in records for k in r.numeric})
    categorical_fields = sorted({k for r in records for k in r.categorical})
    medians = {}
    for f in numeric_fields:
        vals = [r.numeric.get(f) for r in records]
        vals = [v for v in vals if v is not None]
        if not vals:
            raise DataValidationError(f"static field {f!r} is missing for every patient")
        medians[f] = float(np.median(vals))
    modes, labels = {}, {}
    for f in categorical_fields:
        vals = [r.categorical.get(f) for r in records]
        vals = [v for v in vals if v is not None]
        if not vals:
            raise DataValidationError(f"static field {f!r} is missing for every patient")
        counts = Counter(vals)
        top = max(counts.values())
        modes[f] = min(v for v, c in counts.items() if c == top)
        labels[f] = sorted(counts)
    return StaticSchema(medians, modes, labels)


def impute_static(
    records: Sequence[StaticRecord], schema: Optional[StaticSchema] = None
) -> list[StaticRecord]:
    """Fill missing static fields with the cohort median (numeric) or mode (categorical).

    ``schema`` supplies the fill values; by default it is learned from
    ``records`` themselves. Present values are never touched.
    """
    if schema is None:
        schema = fit_static_schema(records)
    out = []
    for r in records:
        num = {
            f: (r.numeric.get(f) if r.numeric.get(f) is not None else schema.numeric_medians[f])
            for f in schema.numeric_medians
        }
        cat = {
            f: (
                r.categorical.get(f)
                if r.categorical.get(f) is not None
                else schema.categorical_modes[f]
            )
            for f in schema.categorical_modes
        }
        out.append(StaticRecord(r.patient_id, num, cat))
    return out


def encode_static(record: StaticRecord, schema: Optional[StaticSchema] = None) -> dict[str, float]:
    """Numeric fields pass through; categoricals become sorted-label one-hot columns."""
    out: dict[str, float] = {}
    for f in sorted(schema.numeric_medians if schema else record.numeric):
        v = record.numeric.get(f)
        out[f] = float(v) if v is not None else float("nan")
    if schema is not None:
        label_sets = schema.categorical_labels
    else:
        label_sets = {f: [v] for f, v in record.categorical.items() if v is not None}
    for f in sorted(label_sets):
        value = record.categorical.get(f)
        for lab in label_sets[f]:
            out[f"{f}={lab}"] = 1.0 if value == lab else 0.0
    return out


def write_static(records: Sequence[StaticRecord], path) -> None:
    num_fields = sorted({k for r in records for k in r.numeric})
    cat_fields = sorted({k for r in records for k in r.categorical})
    rows = []
    for r in records:
        row = {"patient_id": r.patient_id}
        for f in num_fields:
            v = r.numeric.get(f)
            row[f] = "" if v is None else repr(float(v))
        for f in cat_fields:
            row[f] = r.categorical.get(f) or ""
        rows.append(row)
    write_csv(path, rows, ["patient_id"] + num_fields + cat_fields)
