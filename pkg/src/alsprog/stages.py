"""Pipeline stages. Each reads the artifacts of earlier stages from disk and
writes its own under ``<output_dir>/<stage>/`` with a run manifest.

Running ``pipeline`` simply runs every stage in order through the same
files, so a stage re-run from persisted artifacts reproduces it exactly.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Optional

import pandas as pd

from . import __version__, harness, plotting
from .augment import MergeDecision, merge_decisions, merge_summary
from .config import PipelineConfig, render_config
from .core import CLINICIAN, QUESTIONS, SELF, ConfigError, DataValidationError, question_label, substream
from .dataset import WindowSettings, align_cohort, feature_table, window_set
from .featurize import (
    apply_prune,
    prune_features,
    read_feature_table,
    relevance_table,
    split_columns,
)
from .ingest import (
    Cohort,
    StaticSchema,
    fit_static_schema,
    impute_static,
    load_cohort_dir,
    load_static,
    write_static,
)
from .io import atomic_write_text, file_digest, write_csv, write_frame, write_json
from .sync import audit_rows, cohort_followup_profile
from .synth import generate, write_cohort

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "align", "augment", "extract", "select-features", "train", "evaluate", "report")


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.output

    @property
    def data_dir(self) -> Path:
        return Path(self.cfg.input_dir) if self.cfg.input_dir else self.root / "data"

    def dir(self, stage: str) -> Path:
        return self.root / stage.replace("-", "_")

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DataValidationError(f"missing artifact; run the {stage!r} stage first", path=path)
        return path

    def manifest(self, stage: str, inputs, outputs, extra: Optional[dict] = None) -> None:
        def rel(p):
            p = Path(p)
            try:
                return p.relative_to(self.root).as_posix()
            except ValueError:
                return p.name

        doc = {
            "stage": stage,
            "package_version": __version__,
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": {rel(p): file_digest(p) for p in sorted(map(Path, inputs))},
            "outputs": {rel(p): file_digest(p) for p in sorted(map(Path, outputs))},
        }
        if extra:
            doc.update(extra)
        write_json(self.dir(stage) / "run_manifest.json", doc)

    def window_settings(self) -> WindowSettings:
        c = self.cfg
        return WindowSettings(c.tail_max_gap_days, c.horizon_min_days, c.augment_alpha)

    def cohort_files(self) -> list[Path]:
        return [self.data_dir / n for n in ("static.csv", "visits.csv", "sensors.csv")]

    def features_path(self, source: str, mode: str) -> Path:
        return self.dir("extract") / f"features_{source}_{mode}.csv"


# --------------------------------------------------------------------------


def run_synth(ws: Workspace) -> Path:
    out = ws.data_dir
    paths = write_cohort(generate(ws.cfg.synth_config()), out)
    ws.manifest("synth", [], paths.values())
    return out


def _split(patient_ids, frac: float, seed: int) -> dict[str, str]:
    ids = sorted(patient_ids)
    n_hold = int(math.floor(frac * len(ids) + 0.5))
    if frac > 0:
        n_hold = max(1, n_hold)
    perm = substream(seed, "holdout").permutation(len(ids))
    held = {ids[i] for i in perm[:n_hold]}
    return {p: ("heldout" if p in held else "dev") for p in ids}


def run_ingest(ws: Workspace) -> dict:
    files = ws.cohort_files()
    cohort = load_cohort_dir(ws.data_dir)
    split = _split(cohort.patient_ids, ws.cfg.holdout_frac, ws.cfg.seed)
    dev = [r for r in cohort.static if split.get(r.patient_id) == "dev"]
    schema = fit_static_schema(dev or cohort.static)
    d = ws.dir("ingest")
    write_static(impute_static(cohort.static, schema), d / "static_imputed.csv")
    write_json(d / "static_schema.json", schema.to_dict())
    write_csv(d / "split.csv", [{"patient_id": p, "split": s} for p, s in split.items()], ["patient_id", "split"])
    summary = {
        "patients": len(cohort.patient_ids),
        "visits": len(cohort.visits),
        "sensor_series": len(cohort.sensors),
        "channels": cohort.channels,
        "dev_patients": sum(s == "dev" for s in split.values()),
        "heldout_patients": sum(s == "heldout" for s in split.values()),
    }
    write_json(d / "summary.json", summary)
    outs = [d / n for n in ("static_imputed.csv", "static_schema.json", "split.csv", "summary.json")]
    ws.manifest("ingest", files, outs)
    return summary


def load_ingested(ws: Workspace) -> tuple[Cohort, StaticSchema, dict[str, str]]:
    d = ws.dir("ingest")
    cohort = load_cohort_dir(ws.data_dir)
    cohort.static = load_static(ws.require(d / "static_imputed.csv", "ingest"))
    schema = StaticSchema.from_dict(json.loads(ws.require(d / "static_schema.json", "ingest").read_text()))
    split_df = pd.read_csv(ws.require(d / "split.csv", "ingest"), dtype=str)
    return cohort, schema, dict(zip(split_df["patient_id"], split_df["split"]))


def _ingest_inputs(ws: Workspace) -> list[Path]:
    d = ws.dir("ingest")
    return ws.cohort_files() + [d / "static_imputed.csv", d / "static_schema.json", d / "split.csv"]


def run_align(ws: Workspace) -> dict:
    cohort, _, _ = load_ingested(ws)
    aligned = align_cohort(cohort, ws.window_settings())
    rows = audit_rows(aligned)
    path = ws.dir("align") / "audit.csv"
    write_csv(path, rows, ["patient_id", "day", "action", "reason"])
    ws.manifest("align", _ingest_inputs(ws), [path])
    counts = {}
    for r in rows:
        counts[r["action"]] = counts.get(r["action"], 0) + 1
    return counts


DECISION_COLUMNS = ["patient_id", "question", "stat", "dof", "p", "merged", "reason"]


def run_augment(ws: Workspace) -> dict:
    d = ws.dir("augment")
    if not ws.cfg.augmentation:
        ws.manifest("augment", [], [], {"disabled": True})
        return {"disabled": True}
    cohort, _, _ = load_ingested(ws)
    decisions = merge_decisions(
        cohort.visits_by_patient(CLINICIAN), cohort.visits_by_patient(SELF), ws.cfg.augment_alpha
    )
    path = d / "merge_decisions.csv"
    write_csv(path, [x.as_row() for x in decisions], DECISION_COLUMNS)
    summary = merge_summary(decisions)
    if summary["low_expected"]:
        log.warning(
            "%d of %d testable pairs have an expected count below 5; chi-squared p-values are approximate",
            summary["low_expected"], summary["testable"],
        )
    write_json(d / "summary.json", summary)
    ws.manifest("augment", _ingest_inputs(ws), [path, d / "summary.json"])
    return summary


def read_decisions(path) -> list[MergeDecision]:
    df = pd.read_csv(path, dtype={"patient_id": str, "reason": str}, keep_default_na=False)
    out = []
    for r in df.itertuples(index=False):
        out.append(
            MergeDecision(
                r.patient_id,
                int(r.question),
                float(r.stat) if r.stat != "" else math.nan,
                int(r.dof),
                float(r.p) if r.p != "" else math.nan,
                str(r.merged).lower() == "true",
                r.reason,
            )
        )
    return out


def run_extract(ws: Workspace) -> dict[str, int]:
    cohort, schema, _ = load_ingested(ws)
    inputs = _ingest_inputs(ws)
    settings = ws.window_settings()
    counts = {}
    outputs = []
    for source in ws.cfg.data_sources:
        decisions = None
        if source == "augmented":
            dpath = ws.require(ws.dir("augment") / "merge_decisions.csv", "augment")
            decisions = read_decisions(dpath)
            inputs.append(dpath)
        wset = window_set(cohort, source, settings, decisions)
        for mode in ws.cfg.feature_modes:
            df = feature_table(cohort, wset.windows, wset.aligned, schema, cohort.channels, mode)
            path = ws.features_path(source, mode)
            write_frame(path, df)
            outputs.append(path)
            counts[f"{source}_{mode}"] = len(df)
    ws.manifest("extract", inputs, outputs)
    return counts


def _load_features(ws: Workspace, source: str, mode: str) -> pd.DataFrame:
    return read_feature_table(ws.require(ws.features_path(source, mode), "extract"))


def _split_ids(ws: Workspace, which: str) -> set[str]:
    split_df = pd.read_csv(ws.require(ws.dir("ingest") / "split.csv", "ingest"), dtype=str)
    return set(split_df.loc[split_df["split"] == which, "patient_id"])


RELEVANCE_COLUMNS = ["question", "feature", "rho", "p", "p_adj", "selected"]


def run_select_features(ws: Workspace) -> dict[str, int]:
    """Relevance tables on development rows (training redoes this per fold)."""
    dev = _split_ids(ws, "dev")
    sel = ws.cfg.selection()
    outputs, inputs, counts = [], [ws.dir("ingest") / "split.csv"], {}
    for source in ws.cfg.data_sources:
        for mode in ws.cfg.feature_modes:
            inputs.append(ws.features_path(source, mode))
            df = _load_features(ws, source, mode)
            df = df[df["patient_id"].isin(dev)]
            rows, prune_rows = [], []
            for q in QUESTIONS:
                sub = df[df["question"] == q]
                _, sensor = split_columns(sub)
                if len(sub) == 0 or not sensor:
                    continue
                try:
                    pr = prune_features(sub[sensor], sel.max_missing_frac, sel.min_variance)
                except DataValidationError as exc:
                    log.warning("%s/%s q%d: %s", source, mode, q, exc)
                    continue
                prune_rows += [{"question": question_label(q), "feature": c, "reason": why} for c, why in pr.log]
                rel = relevance_table(
                    apply_prune(sub[sensor], pr), sub["future_value"], sel.mode, sel.fdr_level, sel.k
                )
                for r in rel:
                    rows.append(
                        {
                            "question": question_label(q),
                            "feature": r.feature,
                            "rho": r.rho,
                            "p": r.p_value,
                            "p_adj": r.p_adjusted,
                            "selected": r.selected,
                        }
                    )
            d = ws.dir("select-features")
            path = d / f"relevance_{source}_{mode}.csv"
            ppath = d / f"pruned_{source}_{mode}.csv"
            write_csv(path, rows, RELEVANCE_COLUMNS)
            write_csv(ppath, prune_rows, ["question", "feature", "reason"])
            outputs += [path, ppath]
            counts[f"{source}_{mode}"] = sum(bool(r["selected"]) for r in rows)
    ws.manifest("select-features", inputs, outputs)
    return counts


def train_settings(cfg: PipelineConfig, threads: int = 1) -> harness.TrainSettings:
    return harness.TrainSettings(
        lambdas=tuple(cfg.lambdas),
        alphas=tuple(cfg.alphas),
        models=tuple(cfg.models),
        outer_k=cfg.outer_k,
        inner_k=cfg.inner_k,
        seed=cfg.seed,
        selection=cfg.selection(),
        tol=cfg.tol,
        grid_tol=cfg.grid_tol,
        max_iter=cfg.max_iter,
        threads=threads,
    )


def model_path(bundle_dir: Path, q: int) -> Path:
    return bundle_dir / f"model_q{q:02d}.json"


def run_train(ws: Workspace, threads: int = 1) -> dict[int, str]:
    cfg = ws.cfg
    dev = _split_ids(ws, "dev")
    train_tables, eval_tables, inputs = {}, {}, [ws.dir("ingest") / "split.csv"]
    for source in cfg.data_sources:
        for mode in cfg.feature_modes:
            inputs.append(ws.features_path(source, mode))
            df = _load_features(ws, source, mode)
            df = df[df["patient_id"].isin(dev)].reset_index(drop=True)
            train_tables[harness.Variant(source, mode)] = df
            if source == "clinical":
                eval_tables[mode] = df
    patients = sorted(set().union(*(set(df["patient_id"]) for df in train_tables.values())))
    if not patients:
        raise DataValidationError("no development windows to train on")
    settings = train_settings(cfg, threads)
    plan = harness.plan_folds(patients, cfg.outer_k, cfg.inner_k, cfg.seed)
    selections, finals = harness.select_models(train_tables, eval_tables, plan, settings)

    d = ws.dir("train")
    outputs = []
    for q, fm in sorted(finals.items()):
        p = model_path(d, q)
        write_json(p, fm.to_dict())
        outputs.append(p)
    rep = d / "selection_report.csv"
    write_csv(rep, harness.selection_rows(selections), harness.SELECTION_COLUMNS)
    folds = d / "folds.csv"
    write_csv(
        folds,
        [{"patient_id": p, "outer_fold": i} for i, f in enumerate(plan.outer) for p in f.test],
        ["patient_id", "outer_fold"],
    )
    schema = json.loads((ws.dir("ingest") / "static_schema.json").read_text())
    bundle = {
        "questions": {question_label(q): finals[q].candidate for q in sorted(finals)},
        "feature_modes": list(cfg.feature_modes),
        "data_sources": list(cfg.data_sources),
        "static_schema": schema,
        "training_patients": patients,
        "config_hash": cfg.digest(),
    }
    write_json(d / "bundle.json", bundle)
    atomic_write_text(d / "config.ini", render_config(cfg, paths=False))
    outputs += [rep, folds, d / "bundle.json", d / "config.ini"]
    ws.manifest("train", inputs, outputs)
    return {q: finals[q].candidate for q in sorted(finals)}


def load_bundle(bundle_dir) -> dict[int, harness.FinalModel]:
    bundle_dir = Path(bundle_dir)
    models = {}
    for q in QUESTIONS:
        p = model_path(bundle_dir, q)
        if p.exists():
            models[q] = harness.FinalModel.from_dict(json.loads(p.read_text()))
    if not models:
        raise DataValidationError("no model documents in bundle", path=bundle_dir)
    return models


def table_mode(df: pd.DataFrame) -> str:
    """Feature mode of a table, read off its sensor column names."""
    _, sensor = split_columns(df)
    suffixes = {c.split("__", 1)[1] for c in sensor}
    return "median" if suffixes <= {"median"} else "catalog"


PREDICTION_COLUMNS = [
    "patient_id", "question", "window_start", "window_end", "future_value",
    "raw_prediction", "prediction", "candidate",
]
METRIC_COLUMNS = ["question", "rmse", "mae", "n"]


def run_evaluate(ws: Workspace) -> dict:
    cfg = ws.cfg
    held = _split_ids(ws, "heldout")
    if not held:
        raise ConfigError("no held-out patients; set holdout_frac > 0 to evaluate")
    models = load_bundle(ws.require(ws.dir("train"), "train"))
    tables, inputs = {}, [ws.dir("ingest") / "split.csv"]
    for mode in cfg.feature_modes:
        inputs.append(ws.features_path("clinical", mode))
        df = _load_features(ws, "clinical", mode)
        tables[mode] = df[df["patient_id"].isin(held)].reset_index(drop=True)
    inputs += [model_path(ws.dir("train"), q) for q in models]
    default_mode = cfg.feature_modes[0]
    preds = harness.predict_bundle(models, tables, default_mode)
    naive = harness.predict_bundle(harness.naive_bundle(sorted(models)), tables, default_mode)
    metrics = harness.evaluate(preds, cfg.metric_mode)
    naive_metrics = harness.evaluate(naive, cfg.metric_mode)
    d = ws.dir("evaluate")
    write_csv(d / "predictions.csv", preds.to_dict(orient="records"), PREDICTION_COLUMNS)
    write_csv(d / "metrics.csv", harness.metric_rows(metrics), METRIC_COLUMNS)
    write_csv(d / "naive_metrics.csv", harness.metric_rows(naive_metrics), METRIC_COLUMNS)
    outs = [d / "predictions.csv", d / "metrics.csv", d / "naive_metrics.csv"]
    ws.manifest("evaluate", inputs, outs, {"metric_mode": cfg.metric_mode})
    return {"bundle": metrics["ALL"], "naive": naive_metrics["ALL"]}


def predict_files(bundle_dir, feature_paths, out_path) -> int:
    """Apply a bundle to one feature table per mode; writes a predictions CSV."""
    models = load_bundle(bundle_dir)
    tables = {}
    for p in feature_paths:
        df = read_feature_table(p)
        tables[table_mode(df)] = df
    needed = {m.variant.mode for m in models.values() if m.variant}
    missing = needed - set(tables)
    if missing:
        raise DataValidationError(f"bundle needs feature tables for mode(s) {sorted(missing)}")
    preds = harness.predict_bundle(models, tables, sorted(tables)[0])
    write_csv(out_path, preds.to_dict(orient="records"), PREDICTION_COLUMNS)
    return len(preds)


IMPORTANCE_COLUMNS = ["feature", "importance", "rank"]


def run_report(ws: Workspace) -> list[Path]:
    tdir = ws.require(ws.dir("train"), "train")
    models = load_bundle(tdir)
    d = ws.dir("report")
    outputs = []
    imps = {}
    for q, m in sorted(models.items()):
        imps[q] = m.importance()
        p = d / f"importance_q{q:02d}.csv"
        write_csv(p, [vars(i) for i in imps[q]], IMPORTANCE_COLUMNS)
        outputs.append(p)
    outputs.append(plotting.plot_importance(imps, d / "importance.png"))

    sel = pd.read_csv(ws.require(tdir / "selection_report.csv", "train"), keep_default_na=False)
    comp = _comparison_rows(sel)
    cpath = d / "model_comparison.csv"
    write_csv(cpath, comp, ["candidate"] + [question_label(q) for q in QUESTIONS])
    outputs.append(cpath)

    cohort, _, _ = load_ingested(ws)
    aligned = [p for p in align_cohort(cohort, ws.window_settings()) if p.usable]
    if aligned:
        counts, stats = cohort_followup_profile(aligned)
        fpath = d / "followup_profile.csv"
        write_csv(
            fpath,
            [
                {"followup_index": s.followup_index, "question": question_label(s.question), "n": s.n,
                 "patients": counts[s.followup_index], "mean": s.mean, "ci_low": s.ci_low, "ci_high": s.ci_high}
                for s in stats
            ],
            ["followup_index", "question", "n", "patients", "mean", "ci_low", "ci_high"],
        )
        outputs += [fpath, plotting.plot_followup(counts, stats, d / "followup_profile.png")]
    inputs = [model_path(tdir, q) for q in models] + [tdir / "selection_report.csv"] + _ingest_inputs(ws)
    ws.manifest("report", inputs, outputs)
    return outputs


def _comparison_rows(sel: pd.DataFrame) -> list[dict]:
    """Candidates by question, mean validation RMSE; the winner is starred."""
    out = {}
    for r in sel.itertuples(index=False):
        row = out.setdefault(r.candidate, {"candidate": r.candidate})
        val = "" if r.mean_val_rmse == "" else f"{float(r.mean_val_rmse):.4f}"
        if str(r.winner).lower() == "true":
            val += "*"
        row[r.question] = val
    return [out[k] for k in sorted(out, key=lambda c: (c != harness.NAIVE, c))]


def run_stage(ws: Workspace, stage: str, threads: int = 1):
    fn = {
        "synth": run_synth,
        "ingest": run_ingest,
        "align": run_align,
        "augment": run_augment,
        "extract": run_extract,
        "select-features": run_select_features,
        "train": lambda w: run_train(w, threads),
        "evaluate": run_evaluate,
        "report": run_report,
    }[stage]
    return fn(ws)


def run_pipeline(ws: Workspace, threads: int = 1) -> dict:
    results = {}
    for stage in STAGES:
        if stage == "synth" and ws.cfg.input_dir:
            continue
        if stage == "evaluate" and ws.cfg.holdout_frac == 0:
            continue
        log.info("stage %s", stage)
        results[stage] = run_stage(ws, stage, threads)
    return results
