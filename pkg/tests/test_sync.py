import numpy as np
import pytest

from _util import series, visit
from alsprog.core import QUESTIONS, VisitRecord
from alsprog.featurize import window_sensor_features
from alsprog.sync import (
    NO_CLINICIAN_VISITS,
    PRE_SENSOR,
    SINGLE_VISIT,
    TAIL_GT_60D,
    align,
    audit_rows,
    build_windows,
    cohort_followup_profile,
)


def days(p):
    return [v.day for v in p.visits]


def test_worked_example_drops_only_690():
    vs = [visit("A", d) for d in (690, 780, 873)]
    p = align("A", vs, [series("A", "s", 800, 900)])
    assert days(p) == [780, 873]
    assert [(d.day, d.reason) for d in p.dropped_visits] == [(690, PRE_SENSOR)]
    assert p.sensor_first_day == 800 and p.clinical_first_day == 690


def test_sensor_before_first_visit_keeps_everything():
    vs = [visit("A", d) for d in (150, 250, 350)]
    p = align("A", vs, [series("A", "s", 100, 400)])
    assert days(p) == [150, 250, 350] and not p.dropped_visits


def test_visit_on_first_sensor_day_is_the_anchor():
    vs = [visit("A", d) for d in (700, 800, 900)]
    p = align("A", vs, [series("A", "s", 800, 950)])
    assert days(p) == [800, 900]


@pytest.mark.parametrize("last_visit, kept", [(960, True), (961, False)])
def test_tail_boundary(last_visit, kept):
    vs = [visit("A", d) for d in (700, 800, last_visit)]
    p = align("A", vs, [series("A", "s", 600, 900)])
    assert (last_visit in days(p)) is kept
    if not kept:
        assert [(d.day, d.reason) for d in p.dropped_visits] == [(last_visit, TAIL_GT_60D)]


def test_tail_gap_is_configurable():
    vs = [visit("A", d) for d in (700, 800, 990)]
    assert 990 in days(align("A", vs, [series("A", "s", 600, 900)], tail_max_gap_days=90))


def test_only_first_tail_visit_survives():
    vs = [visit("A", d) for d in (700, 800, 930, 950)]
    p = align("A", vs, [series("A", "s", 600, 900)])
    assert days(p) == [700, 800, 930]
    assert [(d.day, d.reason) for d in p.dropped_visits] == [(950, TAIL_GT_60D)]


def test_sensors_truncated_after_last_kept_visit():
    vs = [visit("A", d) for d in (100, 200)]
    p = align("A", vs, [series("A", "s", 50, 400)])
    assert p.sensors[0].days[-1] == 200
    assert p.sensor_last_day == 200


def test_single_visit_patient_excluded():
    p = align("A", [visit("A", 100)], [series("A", "s", 50, 400)])
    assert p.excluded == SINGLE_VISIT and not p.usable
    assert build_windows(p) == []
    rows = audit_rows([p])
    assert rows == [{"patient_id": "A", "day": 100, "action": "exclude", "reason": SINGLE_VISIT}]


def test_no_clinician_visits():
    p = align("A", [], [series("A", "s", 0, 10)])
    assert p.excluded == NO_CLINICIAN_VISITS


def test_align_is_a_fixed_point():
    vs = [visit("A", d) for d in (690, 780, 873, 990)]
    p = align("A", vs, [series("A", "s", 800, 900)])
    q = align("A", p.visits, p.sensors)
    assert days(q) == days(p) and not q.dropped_visits
    assert np.array_equal(q.sensors[0].days, p.sensors[0].days)


def test_every_dropped_visit_has_one_reason():
    vs = [visit("A", d) for d in (10, 600, 690, 780, 873, 970, 980)]
    p = align("A", vs, [series("A", "s", 800, 900)])
    reasons = {d.reason for d in p.dropped_visits}
    assert reasons <= {PRE_SENSOR, TAIL_GT_60D, SINGLE_VISIT}
    dropped = [d.day for d in p.dropped_visits]
    assert not set(dropped) & set(days(p))
    assert len(p.dropped_visits) + len(p.visits) == len(vs)


def test_windows_from_worked_example():
    vs = [VisitRecord("A", 780, "clinician", {1: 4}), VisitRecord("A", 873, "clinician", {1: 3})]
    p = align("A", vs, [series("A", "s", 800, 900)])
    (w,) = build_windows(p)
    assert (w.window_start, w.window_end, w.previous_value, w.target_value) == (780, 873, 4, 3)
    assert w.delta_days == 93 and w.days_since_diagnosis == 780 and w.followup_index == 1


def test_three_full_visits_give_24_windows():
    p = align("A", [visit("A", d) for d in (100, 200, 300)], [series("A", "s", 50, 300)])
    assert len(build_windows(p)) == 24


def test_missing_question_skips_window():
    scores = {q: 3 for q in QUESTIONS}
    partial = {q: 3 for q in QUESTIONS if q != 5}
    vs = [VisitRecord("A", 100, "clinician", scores), VisitRecord("A", 200, "clinician", partial)]
    ws = build_windows(align("A", vs, [series("A", "s", 50, 300)]))
    assert len(ws) == 11 and all(w.question != 5 for w in ws)


def test_no_look_ahead_in_window_features():
    vs = [visit("A", d) for d in (100, 200, 300)]
    # values jump to 1000 on the target day; they must never reach a window ending there
    vals = np.where(np.arange(50, 301) >= 200, 1000.0, 1.0)
    p = align("A", vs, [series("A", "s", 50, 300, vals)])
    w = [w for w in build_windows(p) if w.window_end == 200][0]
    feats = window_sensor_features(w, p.sensors, ["s"], "catalog")
    assert feats["s__max"] == 1.0


def test_followup_profile_single_patient():
    p = align("A", [visit("A", d, 4) for d in (100, 200, 300)], [series("A", "s", 50, 300)])
    counts, stats = cohort_followup_profile([p])
    assert counts == [1, 1, 1]
    assert all(s.ci_low is None and s.ci_high is None for s in stats)


def test_followup_profile_constant_scores():
    ps = [align(f"P{i}", [visit(f"P{i}", d, 4) for d in (100, 200)], []) for i in range(3)]
    counts, stats = cohort_followup_profile(ps)
    assert counts == [3, 3]
    assert all(s.mean == 4.0 and s.ci_low == s.ci_high == 4.0 for s in stats)


def test_followup_counts_non_increasing_and_ci():
    ps = []
    for i, n in enumerate([2, 3, 5, 4]):
        ps.append(align(f"P{i}", [visit(f"P{i}", 100 * (k + 1), i % 5) for k in range(n)], []))
    counts, stats = cohort_followup_profile(ps)
    assert counts == [4, 4, 3, 2, 1]
    s0 = [s for s in stats if s.followup_index == 0 and s.question == 1][0]
    vals = np.array([0, 1, 2, 3], float)
    half = 1.96 * vals.std(ddof=1) / 2
    assert s0.mean == 1.5 and s0.ci_low == pytest.approx(1.5 - half) and s0.ci_high == pytest.approx(1.5 + half)
