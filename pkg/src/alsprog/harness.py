"""Naive baseline, grouped nested cross-validation and per-question model selection."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import solver
from .core import (
    QUESTIONS,
    ConfigError,
    DataValidationError,
    MetricReport,
    NumericalError,
    per_question_metrics,
    postprocess_array,
    question_label,
    substream,
)
from .featurize import DesignTable, FeaturePipeline, SelectionSettings, fit_feature_pipeline

log = logging.getLogger(__name__)

NAIVE = "naive"
MODEL_KINDS = ("elasticnet", "lasso")
DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(-4, 1, 20))
DEFAULT_ALPHAS = tuple(round(0.1 * k, 1) for k in range(1, 11))
# inner grid paths only rank cells; final and outer refits use the solver default
DEFAULT_GRID_TOL = 1e-4


def naive_predict(previous_value):
    """Carry the previous score forward."""
    return previous_value


# --------------------------------------------------------------------------
# fold planning


@dataclass(frozen=True)
class OuterFold:
    test: tuple[str, ...]
    trainval: tuple[str, ...]
    inner: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]


@dataclass(frozen=True)
class FoldPlan:
    outer: tuple[OuterFold, ...]
    seed: int

    @property
    def patients(self) -> list[str]:
        return sorted(p for f in self.outer for p in f.test)


def _partition(ids: Sequence[str], k: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
    ids = sorted(ids)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return [tuple(sorted(chunk)) for chunk in np.array_split(np.array(shuffled, dtype=object), k)]


def plan_folds(patient_ids: Sequence[str], outer_k: int = 10, inner_k: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-grouped nested folds.

    Outer test groups partition the cohort; for each, the remaining
    patients are partitioned into ``inner_k`` validation groups.
    """
    ids = sorted(set(patient_ids))
    if outer_k < 2 or inner_k < 2:
        raise ConfigError("outer_k and inner_k must both be at least 2")
    if len(ids) < outer_k:
        raise ConfigError(
            f"{len(ids)} patients cannot fill {outer_k} outer folds; lower outer_k or add patients"
        )
    rng = substream(seed, "folds")
    groups = _partition(ids, outer_k, rng)
    outer = []
    for test in groups:
        tv = tuple(p for p in ids if p not in set(test))
        if len(tv) < inner_k:
            raise ConfigError(
                f"{len(tv)} train/validation patients cannot fill {inner_k} inner folds; lower inner_k"
            )
        inner_groups = _partition(tv, inner_k, rng)
        inner = tuple(
            (tuple(p for p in tv if p not in set(val)), val) for val in inner_groups
        )
        outer.append(OuterFold(test, tv, inner))
    return FoldPlan(tuple(outer), int(seed))


def check_plan(plan: FoldPlan) -> None:
    """Raise AssertionError if any split mixes a patient across sides."""
    seen = []
    for f in plan.outer:
        assert not set(f.test) & set(f.trainval)
        assert set(f.test) | set(f.trainval) == set(plan.patients)
        seen.extend(f.test)
        for tr, va in f.inner:
            assert not set(tr) & set(va)
            assert set(tr) | set(va) == set(f.trainval)
    assert len(seen) == len(set(seen))


# --------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class TrainSettings:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    models: tuple[str, ...] = MODEL_KINDS
    outer_k: int = 10
    inner_k: int = 5
    seed: int = 0
    selection: SelectionSettings = SelectionSettings()
    tol: float = solver.DEFAULT_TOL
    grid_tol: float = DEFAULT_GRID_TOL
    max_iter: int = solver.DEFAULT_MAX_ITER
    threads: int = 1

    def model_alphas(self, kind: str) -> tuple[float, ...]:
        if kind == "lasso":
            return (1.0,)
        if kind == "elasticnet":
            return tuple(self.alphas)
        raise ConfigError(f"unknown model kind {kind!r}")

    def variant_alphas(self) -> tuple[float, ...]:
        return tuple(sorted({a for m in self.models for a in self.model_alphas(m)}))


def _rmse_columns(y: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """RMSE of post-processed predictions, one value per column of ``preds``."""
    err = postprocess_array(preds) - y[:, None]
    return np.sqrt(np.mean(err * err, axis=0))


def as_table(data) -> DesignTable:
    return data if isinstance(data, DesignTable) else DesignTable.from_frame(data)


def _rows_for(table: DesignTable, patients) -> DesignTable:
    return table.for_patients(patients)


@dataclass
class FittedCandidate:
    pipeline: FeaturePipeline
    model: solver.ElasticNetModel


def fit_candidate(train, lam: float, alpha: float, settings: TrainSettings) -> FittedCandidate:
    train = as_table(train)
    pipe = fit_feature_pipeline(train, settings.selection)
    X = pipe.transform(train)
    model = solver.fit(X, train.y, lam, alpha, settings.tol, settings.max_iter, pipe.columns)
    return FittedCandidate(pipe, model)


def predict_candidate(fc: FittedCandidate, data) -> np.ndarray:
    return solver.predict(fc.model, fc.pipeline.transform(data))


def grid_scores(
    train: DesignTable,
    val: DesignTable,
    lambdas: Sequence[float],
    alphas: Sequence[float],
    settings: TrainSettings,
) -> np.ndarray:
    """Validation RMSE for every (alpha, lambda) cell; shape (len(alphas), len(lambdas)).

    Relevance selection is learned on ``train`` alone.
    """
    pipe = fit_feature_pipeline(train, settings.selection)
    X = pipe.transform(train)
    y = train.y
    st = solver.standardize(X, y)
    Xv = pipe.transform(val)
    yv = val.y
    out = np.full((len(alphas), len(lambdas)), np.nan)
    for i, a in enumerate(alphas):
        try:
            path = solver.fit_path(
                X, y, lambdas, a, settings.grid_tol, settings.max_iter, pipe.columns, standardized=st
            )
        except (NumericalError, ValueError) as exc:
            log.warning("grid row alpha=%s failed: %s", a, exc)
            continue
        B = np.column_stack([m.coefficients for m in path])
        scale = np.where(st.stds > 0, st.stds, 1.0)
        Z = (Xv - st.means) / scale
        Z[:, st.stds <= 0] = 0.0
        preds = st.target_mean + Z @ B
        out[i] = _rmse_columns(yv, preds)
    return out


def best_cell(scores: np.ndarray, lambdas: Sequence[float], alphas: Sequence[float]) -> Optional[tuple[int, int]]:
    """Index of the minimal score; ties prefer larger lambda, then larger alpha."""
    best, key = None, None
    for i, a in enumerate(alphas):
        for j, lam in enumerate(lambdas):
            s = scores[i, j]
            if not np.isfinite(s):
                continue
            k = (s, -lam, -a)
            if key is None or k < key:
                best, key = (i, j), k
    return best


def grid_search(
    train,
    folds: Sequence[tuple[Sequence[str], Sequence[str]]],
    lambdas: Sequence[float],
    alphas: Sequence[float],
    settings: TrainSettings,
    val_source=None,
) -> tuple[tuple[float, float], np.ndarray]:
    """Mean inner-validation RMSE per cell and the winning (lambda, alpha).

    ``val_source`` supplies validation rows (defaults to ``train``).
    """
    train = as_table(train)
    val_source = train if val_source is None else as_table(val_source)
    per_fold = []
    for tr_ids, va_ids in folds:
        tr, va = _rows_for(train, tr_ids), _rows_for(val_source, va_ids)
        if len(va) == 0:
            continue
        if len(tr) < 2:
            per_fold.append(np.full((len(alphas), len(lambdas)), np.nan))
            continue
        per_fold.append(grid_scores(tr, va, lambdas, alphas, settings))
    if not per_fold:
        raise NumericalError("no inner fold has validation rows")
    mean = _fsum_mean(np.stack(per_fold))
    cell = best_cell(mean, lambdas, alphas)
    if cell is None:
        raise NumericalError("every grid cell failed to fit")
    return (float(lambdas[cell[1]]), float(alphas[cell[0]])), mean


def _fsum_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, NaN if any entry is NaN; order-independent summation."""
    flat = stack.reshape(stack.shape[0], -1)
    out = np.empty(flat.shape[1])
    for c in range(flat.shape[1]):
        col = flat[:, c]
        out[c] = math.nan if np.isnan(col).any() else math.fsum(col.tolist()) / col.size
    return out.reshape(stack.shape[1:])


# --------------------------------------------------------------------------
# model selection


@dataclass(frozen=True)
class Variant:
    """A training table: window source and feature mode."""

    source: str
    mode: str

    @property
    def name(self) -> str:
        return f"{self.mode}:{self.source}"


def candidate_name(kind: str, variant: Optional[Variant]) -> str:
    return NAIVE if kind == NAIVE else f"{kind}:{variant.name}"


@dataclass
class CandidateResult:
    candidate: str
    kind: str
    variant: Optional[Variant]
    mean_val_rmse: float
    lam: Optional[float] = None
    alpha: Optional[float] = None
    outer_test_rmse: list[float] = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class QuestionSelection:
    question: int
    candidates: list[CandidateResult]
    winner: str

    def result(self, name: str) -> CandidateResult:
        return next(c for c in self.candidates if c.candidate == name)


@dataclass
class _OuterTaskResult:
    # per-variant-alpha/lambda inner mean for this outer fold
    scores: Optional[np.ndarray]
    test_rmse: dict[str, float]
    error: Optional[str] = None


def _naive_rmse(table: DesignTable) -> float:
    return float(_rmse_columns(table.y, table.previous[:, None])[0])


def _naive_fold(eval_q: DesignTable, fold) -> tuple[float, float]:
    """(mean inner-validation RMSE, outer-test RMSE) of carry-forward; NaN when empty."""
    vals = [_naive_rmse(va) for _, va_ids in fold.inner if len(va := _rows_for(eval_q, va_ids))]
    test = _rows_for(eval_q, fold.test)
    return (
        math.fsum(vals) / len(vals) if vals else math.nan,
        _naive_rmse(test) if len(test) else math.nan,
    )


def _outer_task(
    train_q: DesignTable,
    eval_q: DesignTable,
    fold,
    variant: Variant,
    settings: TrainSettings,
) -> _OuterTaskResult:
    lambdas = settings.lambdas
    alphas = settings.variant_alphas()
    per_fold = []
    for tr_ids, va_ids in fold.inner:
        va = _rows_for(eval_q, va_ids)
        if len(va) == 0:
            continue
        tr = _rows_for(train_q, tr_ids)
        if len(tr) < 2:
            per_fold.append(np.full((len(alphas), len(lambdas)), np.nan))
            continue
        per_fold.append(grid_scores(tr, va, lambdas, alphas, settings))
    test = _rows_for(eval_q, fold.test)
    if not per_fold:
        return _OuterTaskResult(None, {})
    scores = _fsum_mean(np.stack(per_fold))
    test_rmse = {}
    trainval = _rows_for(train_q, fold.trainval)
    for kind in settings.models:
        idx = [alphas.index(a) for a in settings.model_alphas(kind)]
        sub = scores[idx]
        cell = best_cell(sub, lambdas, [alphas[i] for i in idx])
        name = candidate_name(kind, variant)
        if cell is None or len(test) == 0 or len(trainval) < 2:
            test_rmse[name] = math.nan
            continue
        lam, a = lambdas[cell[1]], alphas[idx[cell[0]]]
        fc = fit_candidate(trainval, lam, a, settings)
        pred = predict_candidate(fc, test)
        test_rmse[name] = float(_rmse_columns(test.y, pred[:, None])[0])
    return _OuterTaskResult(scores, test_rmse)


def _run_tasks(fn: Callable, tasks: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class FinalModel:
    question: int
    candidate: str
    kind: str
    variant: Optional[Variant]
    lam: Optional[float]
    alpha: Optional[float]
    mean_val_rmse: float
    pipeline: Optional[FeaturePipeline] = None
    model: Optional[solver.ElasticNetModel] = None

    def predict(self, data) -> np.ndarray:
        if self.kind == NAIVE:
            if isinstance(data, DesignTable):
                return naive_predict(data.previous.copy())
            return naive_predict(data["previous_value"].to_numpy(float))
        return predict_candidate(FittedCandidate(self.pipeline, self.model), data)

    def importance(self) -> list[solver.Importance]:
        if self.kind == NAIVE:
            return [solver.Importance("previous_value", 1.0, 1)]
        return solver.importance(self.model)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "candidate": self.candidate,
            "kind": self.kind,
            "data_source": self.variant.source if self.variant else None,
            "feature_mode": self.variant.mode if self.variant else None,
            "lambda": self.lam,
            "alpha": self.alpha,
            "mean_val_rmse": self.mean_val_rmse,
            "pipeline": self.pipeline.to_dict() if self.pipeline else None,
            "model": self.model.to_dict() if self.model else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinalModel":
        variant = Variant(d["data_source"], d["feature_mode"]) if d["kind"] != NAIVE else None
        return cls(
            question=int(d["question"]),
            candidate=d["candidate"],
            kind=d["kind"],
            variant=variant,
            lam=d["lambda"],
            alpha=d["alpha"],
            mean_val_rmse=float(d["mean_val_rmse"]),
            pipeline=FeaturePipeline.from_dict(d["pipeline"]) if d["pipeline"] else None,
            model=solver.ElasticNetModel.from_dict(d["model"]) if d["model"] else None,
        )


def _pick_winner(cands: Sequence[CandidateResult]) -> str:
    ok = [c for c in cands if np.isfinite(c.mean_val_rmse)]
    return min(ok, key=lambda c: (c.mean_val_rmse, c.kind != NAIVE, c.candidate)).candidate


def select_models(
    train_tables: Mapping[Variant, pd.DataFrame],
    eval_tables: Mapping[str, pd.DataFrame],
    plan: FoldPlan,
    settings: TrainSettings,
    questions: Sequence[int] = QUESTIONS,
) -> tuple[list[QuestionSelection], dict[int, FinalModel]]:
    """Nested-CV comparison of every candidate per question and the final refits.

    ``train_tables`` maps each variant to its training rows; validation and
    test rows always come from ``eval_tables[mode]`` (clinician targets),
    so every candidate is scored on the same windows.
    """
    variants = sorted(train_tables, key=lambda v: v.name)
    lambdas = settings.lambdas
    alphas = settings.variant_alphas()

    by_q_train = {
        (v, q): as_table(df[df["question"] == q]) for v, df in train_tables.items() for q in questions
    }
    by_q_eval = {
        (m, q): as_table(df[df["question"] == q]) for m, df in eval_tables.items() for q in questions
    }
    tasks = [
        (q, v, o) for q in questions for v in variants for o in range(len(plan.outer))
    ]

    def run(task):
        q, v, o = task
        try:
            return _outer_task(by_q_train[v, q], by_q_eval[v.mode, q], plan.outer[o], v, settings)
        except (NumericalError, DataValidationError, ValueError) as exc:
            return _OuterTaskResult(None, {}, error=str(exc))

    results = dict(zip(tasks, _run_tasks(run, tasks, settings.threads)))

    selections, finals = [], {}
    for q in questions:
        cands = []
        naive_vals, naive_tests, used_outer = [], [], []
        naive_eval = by_q_eval[variants[0].mode, q]
        for o, fold in enumerate(plan.outer):
            nv, nt = _naive_fold(naive_eval, fold)
            if np.isfinite(nv):
                naive_vals.append(nv)
                naive_tests.append(nt)
                used_outer.append(o)
        if not used_outer:
            raise DataValidationError(f"question {q}: no validation windows in any fold")
        cands.append(
            CandidateResult(
                NAIVE, NAIVE, None, math.fsum(naive_vals) / len(naive_vals), outer_test_rmse=naive_tests
            )
        )
        for v in variants:
            outs = [results[(q, v, o)] for o in used_outer]
            errors = [r.error for r in outs if r.error]
            for kind in settings.models:
                name = candidate_name(kind, v)
                if errors or any(r.scores is None for r in outs):
                    cands.append(CandidateResult(name, kind, v, math.nan, error=(errors or ["no scores"])[0]))
                    continue
                idx = [alphas.index(a) for a in settings.model_alphas(kind)]
                pooled = _fsum_mean(np.stack([r.scores[idx] for r in outs]))
                kalphas = [alphas[i] for i in idx]
                cell = best_cell(pooled, lambdas, kalphas)
                if cell is None:
                    cands.append(CandidateResult(name, kind, v, math.nan, error="all cells invalid"))
                    continue
                cands.append(
                    CandidateResult(
                        name,
                        kind,
                        v,
                        float(pooled[cell]),
                        lam=float(lambdas[cell[1]]),
                        alpha=float(kalphas[cell[0]]),
                        outer_test_rmse=[r.test_rmse.get(name, math.nan) for r in outs],
                    )
                )
        winner = _pick_winner(cands)
        sel = QuestionSelection(q, cands, winner)
        selections.append(sel)
        finals[q] = _final_fit(sel, by_q_train, q, settings)
    return selections, finals


def _final_fit(sel: QuestionSelection, by_q_train, q: int, settings: TrainSettings) -> FinalModel:
    w = sel.result(sel.winner)
    naive = FinalModel(q, NAIVE, NAIVE, None, None, None, sel.result(NAIVE).mean_val_rmse)
    if w.kind == NAIVE:
        return naive
    train = by_q_train[w.variant, q]
    try:
        fc = fit_candidate(train, w.lam, w.alpha, settings)
    except (NumericalError, DataValidationError, ValueError) as exc:
        log.warning("q%d: final fit of %s failed (%s); falling back to naive", q, w.candidate, exc)
        return naive
    return FinalModel(q, w.candidate, w.kind, w.variant, w.lam, w.alpha, w.mean_val_rmse, fc.pipeline, fc.model)


def selection_rows(selections: Sequence[QuestionSelection]) -> list[dict]:
    rows = []
    for sel in selections:
        for c in sel.candidates:
            tests = [t for t in c.outer_test_rmse]
            finite = [t for t in tests if np.isfinite(t)]
            rows.append(
                {
                    "question": question_label(sel.question),
                    "candidate": c.candidate,
                    "mean_val_rmse": c.mean_val_rmse,
                    "lambda": c.lam,
                    "alpha": c.alpha,
                    "winner": c.candidate == sel.winner,
                    "mean_test_rmse": math.fsum(finite) / len(finite) if finite else math.nan,
                    "outer_test_rmse": ";".join(repr(float(t)) for t in tests),
                    "error": c.error or "",
                }
            )
    return rows


SELECTION_COLUMNS = [
    "question",
    "candidate",
    "mean_val_rmse",
    "lambda",
    "alpha",
    "winner",
    "mean_test_rmse",
    "outer_test_rmse",
    "error",
]


# --------------------------------------------------------------------------
# evaluation


def predict_bundle(
    models: Mapping[int, FinalModel], eval_tables: Mapping[str, pd.DataFrame], mode_default: str
) -> pd.DataFrame:
    """Raw and post-processed predictions for every clinician window."""
    parts = []
    for q in sorted(models):
        m = models[q]
        mode = m.variant.mode if m.variant else mode_default
        table = eval_tables[mode]
        rows = table[table["question"] == q]
        if len(rows) == 0:
            continue
        raw = np.asarray(m.predict(rows), dtype=float)
        parts.append(
            pd.DataFrame(
                {
                    "patient_id": rows["patient_id"].to_numpy(),
                    "question": q,
                    "window_start": rows["window_start"].to_numpy(),
                    "window_end": rows["window_end"].to_numpy(),
                    "future_value": rows["future_value"].to_numpy(),
                    "raw_prediction": raw,
                    "prediction": postprocess_array(raw),
                    "candidate": m.candidate,
                }
            )
        )
    if not parts:
        raise DataValidationError("no windows to predict")
    out = pd.concat(parts, ignore_index=True)
    return out.sort_values(["patient_id", "question", "window_start", "window_end"], kind="mergesort").reset_index(drop=True)


def evaluate(predictions: pd.DataFrame, metric_mode: str = "rounded") -> dict[str, MetricReport]:
    """Per-question and pooled metrics of a prediction frame."""
    if metric_mode == "rounded":
        col = "prediction"
    elif metric_mode == "raw":
        col = "raw_prediction"
    else:
        raise ConfigError(f"unknown metric mode {metric_mode!r}")
    return per_question_metrics(
        predictions["question"].to_numpy(), predictions["future_value"].to_numpy(float), predictions[col].to_numpy(float)
    )


def naive_bundle(questions: Sequence[int] = QUESTIONS) -> dict[int, FinalModel]:
    return {q: FinalModel(q, NAIVE, NAIVE, None, None, None, math.nan) for q in questions}


def metric_rows(metrics: Mapping[str, MetricReport]) -> list[dict]:
    def order(k):
        return (1, 0) if k == "ALL" else (0, int(k[1:]))

    return [
        {"question": k, "rmse": m.rmse, "mae": m.mae, "n": m.n}
        for k, m in sorted(metrics.items(), key=lambda kv: order(kv[0]))
    ]
