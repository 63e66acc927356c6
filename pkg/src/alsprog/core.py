"""Shared domain types, score metrics and prediction post-processing."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

N_QUESTIONS = 12
QUESTIONS = tuple(range(1, N_QUESTIONS + 1))
SCORE_MIN, SCORE_MAX = 0, 4

CLINICIAN = "clinician"
SELF = "self"
SOURCES = (CLINICIAN, SELF)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the top-level seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng([int(seed), tag])


class AlsprogError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(AlsprogError):
    exit_code = 1


class DataValidationError(AlsprogError):
    """Input data violates a schema or domain invariant."""

    exit_code = 2

    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        self.reason = message if row is None else f"row {row}: {message}"
        where = ""
        if path is not None:
            where = f"{path}"
            if row is not None:
                where += f":{row}"
            where += ": "
        super().__init__(where + message)


class NumericalError(AlsprogError):
    exit_code = 3


def check_question(q) -> int:
    q = int(q)
    if q not in QUESTIONS:
        raise ValueError(f"question index must be in 1..{N_QUESTIONS}, got {q}")
    return q


def question_label(q: int) -> str:
    return f"q{check_question(q)}"


@dataclass(frozen=True)
class VisitRecord:
    """One questionnaire observation.

    ``scores`` maps question index (1..12) to an integer score in 0..4;
    questions left unanswered are simply absent.
    """

    patient_id: str
    day: int
    source: str
    scores: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.day < 0:
            raise ValueError(f"visit day must be >= 0, got {self.day}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown visit source {self.source!r}")
        if not self.scores:
            raise ValueError("a visit needs at least one score")
        for q, s in self.scores.items():
            check_question(q)
            if s not in range(SCORE_MIN, SCORE_MAX + 1):
                raise ValueError(f"score for q{q} out of range: {s}")

    def score(self, q: int) -> Optional[int]:
        return self.scores.get(q)


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a metric report needs at least one prediction")
        if not 0.0 <= self.mae <= self.rmse:
            raise ValueError(f"metric invariant 0 <= mae <= rmse violated: mae={self.mae}, rmse={self.rmse}")


def compute_metrics(pairs: Iterable[tuple[float, float]]) -> MetricReport:
    """RMSE and MAE over ``(true, predicted)`` pairs.

    Pass post-processed predictions to score rounded outputs, raw ones
    otherwise; nothing is rounded here.
    """
    arr = np.asarray(list(pairs), dtype=float)
    if arr.size == 0:
        raise ValueError("compute_metrics needs at least one (true, predicted) pair")
    return metrics_from_arrays(arr[:, 0], arr[:, 1])


def metrics_from_arrays(y_true, y_pred) -> MetricReport:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError("true and predicted arrays differ in shape")
    if y_true.size == 0:
        raise ValueError("cannot compute metrics on zero predictions")
    err = np.abs(y_true - y_pred)
    if err.min() == err.max():
        # every error equal: both metrics are that error, exactly
        e = float(err[0])
        return MetricReport(rmse=e, mae=e, n=int(err.size))
    # math.fsum keeps the result independent of summation order
    mse = math.fsum((err * err).tolist()) / err.size
    mae = math.fsum(err.tolist()) / err.size
    rmse = math.sqrt(mse)
    # sqrt rounding can put rmse an ulp under mae when all errors are equal
    rmse = max(rmse, mae)
    return MetricReport(rmse=rmse, mae=mae, n=int(err.size))


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Works on scalars and arrays."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def postprocess(prediction) -> int:
    """Map a raw regression output to a valid score in 0..4."""
    p = float(prediction)
    if not math.isfinite(p):
        raise ValueError(f"cannot post-process non-finite prediction {prediction!r}")
    return int(np.clip(round_half_away(p), SCORE_MIN, SCORE_MAX))


def postprocess_array(predictions) -> np.ndarray:
    p = np.asarray(predictions, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot post-process non-finite predictions")
    return np.clip(round_half_away(p), SCORE_MIN, SCORE_MAX).astype(np.int64)


def per_question_metrics(
    questions: Sequence[int], y_true, y_pred
) -> dict[str, MetricReport]:
    """Metrics per question plus the pooled ``ALL`` row."""
    questions = np.asarray(questions)
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    out = {}
    for q in sorted(set(questions.tolist())):
        m = questions == q
        out[question_label(q)] = metrics_from_arrays(y_true[m], y_pred[m])
    out["ALL"] = metrics_from_arrays(y_true, y_pred)
    return out
