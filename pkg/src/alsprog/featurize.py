"""Window feature extraction, pruning and relevance-based selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .core import ConfigError, DataValidationError
from .ingest import SensorSeries, StaticRecord, StaticSchema, encode_static
from .stats import by_adjust, spearman_columns, spearman_test
from .sync import ObservationWindow

log = logging.getLogger(__name__)

QUANTILES = (0.1, 0.25, 0.6, 0.75, 0.9)
CATALOG = (
    "count",
    "mean",
    "median",
    "std",
    "min",
    "max",
    "range",
    *(f"quantile__q_{q}" for q in QUANTILES),
    "rmssd",
    "linear_slope",
    "benford_correlation",
)
FEATURE_MODES = ("median", "catalog")

KEY_COLUMNS = ["patient_id", "question", "window_start", "window_end"]
ENGINEERED_COLUMNS = ["days_since_diagnosis", "previous_value", "delta_days", "followup_index"]
TARGET_COLUMN = "future_value"
SENSOR_SEP = "__"

_BENFORD = np.log10(1.0 + 1.0 / np.arange(1, 10))


def extract_median(slices: Mapping[str, np.ndarray]) -> dict[str, float]:
    """``<channel>__median`` per channel; NaN marks an empty slice."""
    out = {}
    for ch in sorted(slices):
        v = np.asarray(slices[ch], dtype=float)
        out[f"{ch}__median"] = float(np.median(v)) if v.size else math.nan
    return out


def first_digits(x: np.ndarray) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    x = x[x > 0]
    if x.size == 0:
        return x.astype(np.int64)
    exponent = np.floor(np.log10(x))
    # digits of the value at 15 significant figures, so 0.6 reads as 6 and not 5.99...
    mantissa = np.round(x / 10.0**exponent, 14)
    d = np.floor(mantissa).astype(np.int64)
    # float error in log10 can land one decade off at exact powers of ten
    d = np.where(d >= 10, 1, d)
    d = np.where(d <= 0, 9, d)
    return d


def benford_correlation(x) -> float:
    digits = first_digits(x)
    if digits.size == 0:
        return math.nan
    freq = np.bincount(digits, minlength=10)[1:10] / digits.size
    # a single observed digit (e.g. a constant series) or a flat histogram is degenerate
    if np.count_nonzero(freq) < 2 or np.ptp(freq) == 0:
        return math.nan
    return float(np.corrcoef(freq, _BENFORD)[0, 1])


def catalog_features(days, values) -> dict[str, float]:
    """Every catalog statistic for one channel slice (NaN where undefined)."""
    v = np.asarray(values, dtype=float)
    d = np.asarray(days, dtype=float)
    n = v.size
    out = {"count": float(n)}
    if n == 0:
        for name in CATALOG[1:]:
            out[name] = math.nan
        return out
    out["mean"] = float(v.mean())
    out["median"] = float(np.median(v))
    out["std"] = float(v.std())
    out["min"] = float(v.min())
    out["max"] = float(v.max())
    out["range"] = out["max"] - out["min"]
    for q in QUANTILES:
        out[f"quantile__q_{q}"] = float(np.quantile(v, q, method="linear"))
    if n >= 2:
        diffs = np.diff(v)
        out["rmssd"] = float(np.sqrt(np.mean(diffs * diffs)))
        dc = d - d.mean()
        sdd = float(dc @ dc)
        out["linear_slope"] = float(dc @ (v - v.mean())) / sdd if sdd > 0 else math.nan
    else:
        out["rmssd"] = math.nan
        out["linear_slope"] = math.nan
    out["benford_correlation"] = benford_correlation(v)
    return out


def extract_catalog(slices: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> dict[str, float]:
    """``<channel>__<extractor>`` for every catalog extractor and channel.

    ``slices`` maps channel to ``(days, values)``.
    """
    out = {}
    for ch in sorted(slices):
        days, values = slices[ch]
        for name, val in catalog_features(days, values).items():
            out[f"{ch}{SENSOR_SEP}{name}"] = val
    return out


def sensor_columns_for(channels: Sequence[str], mode: str) -> list[str]:
    if mode == "median":
        return [f"{ch}__median" for ch in sorted(channels)]
    if mode == "catalog":
        return [f"{ch}{SENSOR_SEP}{name}" for ch in sorted(channels) for name in CATALOG]
    raise ConfigError(f"unknown feature mode {mode!r}")


def window_sensor_features(
    window: ObservationWindow, sensors: Sequence[SensorSeries], channels: Sequence[str], mode: str
) -> dict[str, float]:
    by_channel = {s.channel: s for s in sensors}
    empty = (np.empty(0, dtype=np.int64), np.empty(0))
    slices = {
        ch: (by_channel[ch].slice(window.window_start, window.window_end) if ch in by_channel else empty)
        for ch in channels
    }
    if mode == "median":
        return extract_median({ch: s[1] for ch, s in slices.items()})
    if mode == "catalog":
        return extract_catalog(slices)
    raise ConfigError(f"unknown feature mode {mode!r}")


def build_feature_table(
    windows: Sequence[ObservationWindow],
    sensors_by_patient: Mapping[str, Sequence[SensorSeries]],
    static_by_patient: Mapping[str, StaticRecord],
    schema: StaticSchema,
    channels: Sequence[str],
    mode: str,
) -> pd.DataFrame:
    """Training rows in the layout: keys, engineered, static, sensor, target."""
    static_cols = schema.columns
    sensor_cols = sensor_columns_for(channels, mode)
    columns = KEY_COLUMNS + ENGINEERED_COLUMNS + static_cols + sensor_cols + [TARGET_COLUMN]
    rows = []
    cache: dict[tuple, dict] = {}
    for w in sorted(windows, key=lambda w: (w.patient_id, w.question, w.window_start, w.window_end)):
        key = (w.patient_id, w.window_start, w.window_end)
        if key not in cache:
            cache[key] = window_sensor_features(w, sensors_by_patient.get(w.patient_id, ()), channels, mode)
        rec = static_by_patient.get(w.patient_id)
        if rec is None:
            raise DataValidationError(f"no static record for patient {w.patient_id!r}")
        row = {
            "patient_id": w.patient_id,
            "question": w.question,
            "window_start": w.window_start,
            "window_end": w.window_end,
            "days_since_diagnosis": float(w.days_since_diagnosis),
            "previous_value": float(w.previous_value),
            "delta_days": float(w.delta_days),
            "followup_index": float(w.followup_index),
        }
        row.update(encode_static(rec, schema))
        row.update(cache[key])
        row[TARGET_COLUMN] = w.target_value
        rows.append(row)
    df = pd.DataFrame(rows, columns=columns)
    float_cols = ENGINEERED_COLUMNS + static_cols + sensor_cols
    df[float_cols] = df[float_cols].astype(float)
    return df


def read_feature_table(path) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip", dtype={"patient_id": str})
    missing = [c for c in KEY_COLUMNS + ENGINEERED_COLUMNS + [TARGET_COLUMN] if c not in df.columns]
    if missing:
        raise DataValidationError(f"feature table lacks columns {missing}", path=path)
    feat = [c for c in df.columns if c not in KEY_COLUMNS + [TARGET_COLUMN]]
    df[feat] = df[feat].astype(float)
    return df


def split_columns(df: pd.DataFrame) -> tuple[list[str], list[str]]:
    """(always-kept base columns, sensor columns) of a feature table."""
    base, sensor = [], []
    for c in df.columns:
        if c in KEY_COLUMNS or c == TARGET_COLUMN:
            continue
        (sensor if SENSOR_SEP in c else base).append(c)
    return base, sensor


@dataclass
class DesignTable:
    """Array view of a feature table, split into base and sensor blocks."""

    keys: pd.DataFrame
    base_names: list[str]
    base: np.ndarray
    sensor_names: list[str]
    sensor: np.ndarray
    y: np.ndarray

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "DesignTable":
        base, sensor = split_columns(df)
        return cls(
            keys=df[KEY_COLUMNS].reset_index(drop=True),
            base_names=base,
            base=df[base].to_numpy(dtype=float),
            sensor_names=sensor,
            sensor=df[sensor].to_numpy(dtype=float) if sensor else np.empty((len(df), 0)),
            y=df[TARGET_COLUMN].to_numpy(dtype=float),
        )

    def __len__(self) -> int:
        return self.y.size

    @property
    def patients(self) -> np.ndarray:
        return self.keys["patient_id"].to_numpy()

    @property
    def previous(self) -> np.ndarray:
        return self.base[:, self.base_names.index("previous_value")]

    def take(self, mask) -> "DesignTable":
        mask = np.asarray(mask)
        return DesignTable(
            self.keys[mask].reset_index(drop=True),
            self.base_names,
            self.base[mask],
            self.sensor_names,
            self.sensor[mask],
            self.y[mask],
        )

    def for_patients(self, patients) -> "DesignTable":
        return self.take(np.isin(self.patients, list(patients)))


@dataclass(frozen=True)
class PruneResult:
    kept: list[str]
    medians: dict[str, float]
    log: list[tuple[str, str]]


def _prune_arrays(S: np.ndarray, names: Sequence[str], max_missing_frac: float, min_variance: float):
    n = S.shape[0]
    if n == 0:
        raise ValueError("prune_features needs at least one row")
    nan = np.isnan(S)
    miss = nan.sum(axis=0) / n
    kept_idx, medians, plog = [], {}, []
    for j, c in enumerate(names):
        if miss[j] > max_missing_frac:
            plog.append((c, f"missing_frac={miss[j]:.3f}>{max_missing_frac}"))
            continue
        present = S[~nan[:, j], j]
        var = float(present.var()) if present.size else 0.0
        if var < min_variance:
            plog.append((c, f"variance={var:.3g}<{min_variance}"))
            continue
        kept_idx.append(j)
        medians[c] = float(np.median(present))
    if not kept_idx and len(names):
        raise DataValidationError(
            "every feature column was pruned; relax max_missing_frac or min_variance"
        )
    return PruneResult([names[j] for j in kept_idx], medians, plog), kept_idx


def prune_features(
    matrix: pd.DataFrame, max_missing_frac: float = 0.3, min_variance: float = 1e-12
) -> PruneResult:
    """Drop columns that are mostly missing or nearly constant.

    Returns the surviving column names, their medians over the given rows
    (used to fill missing cells), and a ``(column, reason)`` log for the
    dropped ones.
    """
    pr, _ = _prune_arrays(
        matrix.to_numpy(dtype=float), list(matrix.columns), max_missing_frac, min_variance
    )
    return pr


def apply_prune(matrix: pd.DataFrame, prune: PruneResult) -> pd.DataFrame:
    out = matrix.reindex(columns=prune.kept).copy()
    for c in prune.kept:
        out[c] = out[c].fillna(prune.medians[c])
    return out


def _fill(S: np.ndarray, medians: Sequence[float]) -> np.ndarray:
    S = S.copy()
    nan = np.isnan(S)
    if nan.any():
        S[nan] = np.broadcast_to(np.asarray(medians, dtype=float), S.shape)[nan]
    return S


@dataclass
class RelevanceRow:
    feature: str
    rho: Optional[float]
    p_value: Optional[float]
    p_adjusted: Optional[float]
    selected: bool
    n: int
    reason: str = "ok"


def _relevance(
    S: np.ndarray, names: Sequence[str], target, mode: str, fdr_level: float, k: int
) -> list[RelevanceRow]:
    target = np.asarray(target, dtype=float)
    if np.isnan(S).any():
        results = [spearman_test(S[:, j], target) for j in range(S.shape[1])]
    else:
        results = spearman_columns(S, target)
    tested = {names[j]: r.p_value for j, r in enumerate(results) if r.testable}
    report = fdr_select(tested, mode=mode, fdr_level=fdr_level, k=k) if tested else {}
    rows = []
    for name, r in zip(names, results):
        if r.testable:
            adj, sel = report[name]
            rows.append(RelevanceRow(name, r.rho, r.p_value, adj, sel, r.n))
        else:
            rows.append(RelevanceRow(name, r.rho, None, None, False, r.n, r.reason))
    return rows


def relevance_table(
    matrix: pd.DataFrame,
    target,
    mode: str = "keep_all",
    fdr_level: float = 0.05,
    k: int = 10,
) -> list[RelevanceRow]:
    """Spearman-test every column against the target and select the relevant ones."""
    return _relevance(matrix.to_numpy(dtype=float), list(matrix.columns), target, mode, fdr_level, k)


def fdr_select(
    p_values: Mapping[str, float], mode: str = "keep_all", fdr_level: float = 0.05, k: int = 10
) -> dict[str, tuple[float, bool]]:
    """Map feature -> (BY-adjusted p, selected)."""
    if not p_values:
        raise ValueError("fdr_select needs at least one tested feature")
    names = list(p_values)
    p = np.array([p_values[n] for n in names], dtype=float)
    adj = by_adjust(p)
    if mode == "keep_all":
        sel = adj <= fdr_level
    elif mode == "top_k":
        ranked = sorted(range(len(names)), key=lambda i: (p[i], names[i]))
        sel = np.zeros(len(names), dtype=bool)
        sel[ranked[:k]] = True
    else:
        raise ConfigError(f"unknown selection mode {mode!r}")
    return {n: (float(a), bool(s)) for n, a, s in zip(names, adj, sel)}


@dataclass(frozen=True)
class SelectionSettings:
    mode: str = "keep_all"
    fdr_level: float = 0.05
    k: int = 10
    max_missing_frac: float = 0.3
    min_variance: float = 1e-12


@dataclass
class FeaturePipeline:
    """Column preparation learned on training rows only.

    Base columns (engineered and static) are always used; sensor columns
    go through pruning, median fill and relevance selection.
    """

    base_columns: list[str]
    sensor_kept: list[str]
    sensor_medians: dict[str, float]
    sensor_selected: list[str]

    @property
    def columns(self) -> list[str]:
        return self.base_columns + self.sensor_selected

    def transform(self, data) -> np.ndarray:
        table = data if isinstance(data, DesignTable) else DesignTable.from_frame(data)
        missing = [c for c in self.base_columns if c not in table.base_names]
        missing += [c for c in self.sensor_selected if c not in table.sensor_names]
        if missing:
            raise DataValidationError(f"feature table lacks model columns {missing[:5]}")
        bidx = [table.base_names.index(c) for c in self.base_columns]
        X = table.base[:, bidx]
        if np.isnan(X).any():
            raise DataValidationError("missing values in base feature columns")
        if self.sensor_selected:
            pos = {c: j for j, c in enumerate(table.sensor_names)}
            sidx = [pos[c] for c in self.sensor_selected]
            S = _fill(table.sensor[:, sidx], [self.sensor_medians[c] for c in self.sensor_selected])
            X = np.hstack([X, S])
        return X

    def to_dict(self) -> dict:
        return {
            "base_columns": list(self.base_columns),
            "sensor_kept": list(self.sensor_kept),
            "sensor_medians": dict(self.sensor_medians),
            "sensor_selected": list(self.sensor_selected),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturePipeline":
        return cls(d["base_columns"], d["sensor_kept"], d["sensor_medians"], d["sensor_selected"])


def model_base_columns(table: DesignTable) -> list[str]:
    """Base columns minus one redundant level per one-hot group.

    Levels constant on the training rows are dropped, then the last
    remaining level of each group, so the group no longer sums to a
    constant. An exactly singular design slows coordinate descent to a
    crawl at small penalties.
    """
    groups: dict[str, list[int]] = {}
    for j, c in enumerate(table.base_names):
        if "=" in c:
            groups.setdefault(c.split("=", 1)[0], []).append(j)
    drop = set()
    for idx in groups.values():
        varying = [j for j in idx if np.ptp(table.base[:, j]) > 0] if len(table) else []
        drop.update(j for j in idx if j not in varying)
        if varying:
            drop.add(varying[-1])
    return [c for j, c in enumerate(table.base_names) if j not in drop]


def fit_feature_pipeline(train, settings: SelectionSettings = SelectionSettings()) -> FeaturePipeline:
    """Learn pruning, fill values and the relevant sensor columns from ``train``.

    ``train`` is a feature DataFrame or a :class:`DesignTable`.
    """
    table = train if isinstance(train, DesignTable) else DesignTable.from_frame(train)
    base = model_base_columns(table)
    if not table.sensor_names:
        return FeaturePipeline(base, [], {}, [])
    try:
        pr, idx = _prune_arrays(
            table.sensor, table.sensor_names, settings.max_missing_frac, settings.min_variance
        )
    except DataValidationError:
        log.debug("all sensor columns pruned on %d training rows", len(table))
        return FeaturePipeline(base, [], {}, [])
    S = _fill(table.sensor[:, idx], [pr.medians[c] for c in pr.kept])
    rel = _relevance(S, pr.kept, table.y, settings.mode, settings.fdr_level, settings.k)
    selected = [r.feature for r in rel if r.selected]
    return FeaturePipeline(base, pr.kept, pr.medians, selected)
