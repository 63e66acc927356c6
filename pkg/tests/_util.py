"""Small builders shared by the test modules."""

import numpy as np

from alsprog.core import QUESTIONS, VisitRecord
from alsprog.ingest import SensorSeries


def visit(pid, day, score=3, source="clinician", questions=QUESTIONS):
    if isinstance(score, dict):
        return VisitRecord(pid, day, source, dict(score))
    return VisitRecord(pid, day, source, {q: score for q in questions})


def series(pid, channel, start, end, value=0.5):
    days = np.arange(start, end + 1)
    vals = np.full(days.size, float(value)) if np.isscalar(value) else np.asarray(value, float)
    return SensorSeries(pid, channel, days, vals)


def feature_frame(n_pat=12, rows_per=5, questions=(1, 2), seed=0, persistence=False):
    """Small feature table in the extract layout with one planted sensor signal."""
    import pandas as pd

    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n_pat):
        for q in questions:
            for k in range(rows_per):
                prev = float(rng.integers(1, 4))
                sig = float(rng.normal())
                target = prev if persistence else prev - float(sig < -0.3)
                recs.append(
                    {
                        "patient_id": f"P{i:02d}",
                        "question": q,
                        "window_start": 100 * k,
                        "window_end": 100 * (k + 1),
                        "days_since_diagnosis": 100.0 * k,
                        "previous_value": prev,
                        "delta_days": 100.0,
                        "followup_index": float(k + 1),
                        "age": float(50 + i),
                        "s__median": sig,
                        "future_value": target,
                    }
                )
    return pd.DataFrame(recs)
