import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import series, visit
from alsprog.core import DataValidationError
from alsprog.featurize import (
    CATALOG,
    DesignTable,
    SelectionSettings,
    benford_correlation,
    build_feature_table,
    catalog_features,
    extract_catalog,
    extract_median,
    fdr_select,
    first_digits,
    fit_feature_pipeline,
    model_base_columns,
    prune_features,
    apply_prune,
    relevance_table,
    sensor_columns_for,
)
from alsprog.ingest import StaticRecord, fit_static_schema
from alsprog.sync import align, build_windows


def lead_digit(x):
    """First significant digit of x written to 15 significant figures."""
    return int(f"{abs(x):.14e}"[0])


def pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a - a.mean(), b - b.mean()
    return math.fsum(a * b) / math.sqrt(math.fsum(a * a) * math.fsum(b * b))


# extractors ----------------------------------------------------------------


@pytest.mark.parametrize("vals, want", [([1, 3, 2], 2.0), ([1, 2, 3, 4], 2.5)])
def test_median_examples(vals, want):
    assert extract_median({"hr": np.array(vals, float)}) == {"hr__median": want}


def test_median_empty_slice_is_missing():
    assert math.isnan(extract_median({"hr": np.array([])})["hr__median"])


def test_quantile_linear_interpolation():
    f = catalog_features(np.arange(10), np.arange(10.0))
    assert f["quantile__q_0.1"] == pytest.approx(0.9, abs=1e-12)
    assert f["quantile__q_0.6"] == pytest.approx(5.4, abs=1e-12)


def test_rmssd_example():
    f = catalog_features([0, 1, 2], [3.0, 5.0, 9.0])
    assert f["rmssd"] == pytest.approx(math.sqrt(10), abs=1e-12)


def test_constant_series():
    f = catalog_features([0, 1, 2], [2.0, 2.0, 2.0])
    assert f["std"] == 0 and f["range"] == 0 and f["linear_slope"] == 0
    assert math.isnan(f["benford_correlation"])


def test_short_series_marks_missing():
    f = catalog_features([5], [1.5])
    assert f["count"] == 1 and f["mean"] == 1.5
    assert math.isnan(f["rmssd"]) and math.isnan(f["linear_slope"])
    empty = catalog_features([], [])
    assert empty["count"] == 0
    assert all(math.isnan(empty[k]) for k in CATALOG if k != "count")


def test_catalog_has_fifteen_named_columns():
    out = extract_catalog({"b": ([0, 1], [1.0, 2.0]), "a": ([0], [1.0])})
    assert len(out) == 30
    assert list(out)[:15] == [f"a__{name}" for name in CATALOG]
    assert sensor_columns_for(["b", "a"], "catalog") == list(out)
    assert "beat_to_beat_cvsd__quantile__q_0.6" in sensor_columns_for(["beat_to_beat_cvsd"], "catalog")


def test_std_is_population_and_slope_is_ols():
    rng = np.random.default_rng(0)
    d = np.sort(rng.choice(200, 30, replace=False))
    v = rng.normal(size=30)
    f = catalog_features(d, v)
    assert f["std"] == pytest.approx(math.sqrt(math.fsum((v - v.mean()) ** 2) / 30), abs=1e-12)
    assert f["linear_slope"] == pytest.approx(np.polyfit(d, v, 1)[0], abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-300, 1e300))
def test_first_digit_matches_string_oracle(x):
    assert first_digits(np.array([x]))[0] == lead_digit(x)


def test_first_digits_skip_zeros_and_use_magnitude():
    assert list(first_digits([0.0, -0.031, 1000.0, 9.99, 0.6, 0.3])) == [3, 1, 9, 6, 3]


def test_benford_matches_oracle():
    rng = np.random.default_rng(1)
    x = rng.lognormal(0, 2, size=500)
    counts = np.zeros(9)
    for v in x:
        counts[lead_digit(v) - 1] += 1
    want = pearson(counts / counts.sum(), [math.log10(1 + 1 / d) for d in range(1, 10)])
    assert benford_correlation(x) == pytest.approx(want, abs=1e-12)


def test_benford_degenerate_cases():
    assert math.isnan(benford_correlation([0.0, 0.0]))
    assert math.isnan(benford_correlation([1, 2, 3, 4, 5, 6, 7, 8, 9]))


def test_window_extraction_is_pure():
    # features of one window do not depend on other windows
    vs = [visit("A", d) for d in (100, 200, 300)]
    sens = [series("A", "s", 50, 300, np.arange(251.0))]
    p = align("A", vs, sens)
    schema = fit_static_schema([StaticRecord("A", {"age": 60.0})])
    statics = {"A": StaticRecord("A", {"age": 60.0})}
    ws = build_windows(p)
    full = build_feature_table(ws, {"A": p.sensors}, statics, schema, ["s"], "catalog")
    first = [w for w in ws if w.window_start == 100]
    part = build_feature_table(first[::-1], {"A": p.sensors}, statics, schema, ["s"], "catalog")
    sub = full[full.window_start == 100].reset_index(drop=True)
    pd.testing.assert_frame_equal(sub, part)
    assert list(full.columns[:8]) == [
        "patient_id", "question", "window_start", "window_end",
        "days_since_diagnosis", "previous_value", "delta_days", "followup_index",
    ]
    assert full.columns[-1] == "future_value"


# pruning -------------------------------------------------------------------


def test_prune_fills_with_median():
    m = pd.DataFrame({"a": [1.0, np.nan, 3.0]})
    pr = prune_features(m, max_missing_frac=0.5)
    assert pr.kept == ["a"] and pr.medians == {"a": 2.0}
    assert list(apply_prune(m, pr)["a"]) == [1.0, 2.0, 3.0]


def test_prune_drops_missing_and_constant():
    m = pd.DataFrame(
        {"miss": [1.0, np.nan, np.nan, 2.0, 3.0], "const": [2.0] * 5, "ok": [1.0, 2, 3, 4, 5]}
    )
    pr = prune_features(m)
    assert pr.kept == ["ok"]
    assert [c for c, _ in pr.log] == ["miss", "const"]
    assert "missing_frac" in pr.log[0][1] and "variance" in pr.log[1][1]


def test_prune_everything_is_an_error():
    with pytest.raises(DataValidationError, match="relax"):
        prune_features(pd.DataFrame({"c": [1.0, 1.0]}))


# selection -----------------------------------------------------------------


def test_fdr_single_p():
    assert fdr_select({"f": 0.04}) == {"f": (0.04, True)}


def test_fdr_keep_all_threshold():
    out = fdr_select({"a": 0.01, "b": 0.02, "c": 0.04})
    assert {k: v[1] for k, v in out.items()} == {"a": False, "b": False, "c": False}
    out = fdr_select({"a": 0.001, "b": 0.5})
    assert out["a"][1] and not out["b"][1]


def test_fdr_top_k():
    p = {"b": 0.3, "a": 0.3, "c": 0.01, "d": 0.9}
    sel = {k for k, v in fdr_select(p, mode="top_k", k=2).items() if v[1]}
    assert sel == {"c", "a"}
    assert all(v[1] for v in fdr_select(p, mode="top_k", k=10).values())


def test_fdr_needs_a_test():
    with pytest.raises(ValueError):
        fdr_select({})


def test_relevance_report_invariants():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 5, 60).astype(float)
    m = pd.DataFrame({"sig": y + rng.normal(0, 0.3, 60), "noise": rng.normal(size=60), "flat": np.ones(60)})
    rows = {r.feature: r for r in relevance_table(m, y)}
    assert rows["sig"].selected and not rows["noise"].selected
    assert rows["flat"].reason == "zero_variance" and not rows["flat"].selected
    for r in rows.values():
        if r.p_value is not None:
            assert r.p_adjusted >= r.p_value
            assert -1 <= r.rho <= 1


def _frame(n_pat=8, rows_per=6, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n_pat):
        for k in range(rows_per):
            prev = float(rng.integers(0, 5))
            sig = rng.normal()
            recs.append(
                {
                    "patient_id": f"P{i}",
                    "question": 1,
                    "window_start": 100 * k,
                    "window_end": 100 * (k + 1),
                    "days_since_diagnosis": 100.0 * k,
                    "previous_value": prev,
                    "delta_days": 100.0,
                    "followup_index": float(k + 1),
                    "sex=F": float(i % 2),
                    "sex=M": float(1 - i % 2),
                    "s__median": sig,
                    "t__median": rng.normal(),
                    "future_value": float(np.clip(prev + (sig > 0.5) - (sig < -0.5), 0, 4)),
                }
            )
    return pd.DataFrame(recs)


def test_selection_ignores_validation_targets():
    df = _frame()
    val = df.patient_id.isin(["P0", "P1"])
    before = fit_feature_pipeline(df[~val])
    rng = np.random.default_rng(9)
    for _ in range(20):
        shuffled = df.copy()
        shuffled.loc[val, "future_value"] = rng.permutation(shuffled.loc[val, "future_value"].to_numpy())
        after = fit_feature_pipeline(DesignTable.from_frame(shuffled).take(~val.to_numpy()))
        assert after.to_dict() == before.to_dict()


def test_pipeline_transform_and_round_trip():
    df = _frame()
    fp = fit_feature_pipeline(df, SelectionSettings(mode="top_k", k=1))
    assert fp.sensor_selected == ["s__median"]
    X = fp.transform(df)
    assert X.shape == (len(df), len(fp.columns))
    assert type(fp).from_dict(fp.to_dict()).columns == fp.columns
    with pytest.raises(DataValidationError):
        fp.transform(df.drop(columns=["s__median"]))


def test_model_columns_drop_one_level_per_group():
    t = DesignTable.from_frame(_frame())
    cols = model_base_columns(t)
    assert "sex=F" in cols and "sex=M" not in cols
    one_sex = DesignTable.from_frame(_frame(n_pat=1))
    assert not any(c.startswith("sex=") for c in model_base_columns(one_sex))


def test_feature_table_is_deterministic():
    vs = [visit("A", d) for d in (100, 200, 300)]
    p = align("A", vs, [series("A", "s", 50, 300, np.sin(np.arange(251.0)))])
    statics = {"A": StaticRecord("A", {"age": 60.0})}
    schema = fit_static_schema(list(statics.values()))
    a = build_feature_table(build_windows(p), {"A": p.sensors}, statics, schema, ["s"], "catalog")
    b = build_feature_table(build_windows(p), {"A": p.sensors}, statics, schema, ["s"], "catalog")
    assert a.to_csv() == b.to_csv()
