"""Seeded synthetic cohorts with a known score-generating model.

Each patient gets a clinician visit schedule, daily sensor channels with
gaps and, optionally, self-assessment reports. Scores evolve window by
window: a real-valued latent score is formed from the previous score,
per-window channel summaries, static covariates and Gaussian noise, then
rounded and clipped to 0..4.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CLINICIAN, QUESTIONS, SELF, ConfigError, round_half_away, substream
from .io import atomic_write_text, write_csv


@dataclass(frozen=True)
class SignalSpec:
    """Latent next score = intercept + previous * prev + channel and static terms + noise.

    ``below`` maps channel -> (threshold, coef): adds ``coef`` when the
    channel's window mean is under ``threshold``. ``linear`` maps channel ->
    coef on the centered window mean; ``static`` maps numeric static field
    -> coef on its standardized value.
    """

    previous: float = 1.0
    intercept: float = 0.0
    below: dict = field(default_factory=dict)
    linear: dict = field(default_factory=dict)
    static: dict = field(default_factory=dict)
    noise_std: float = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 60
    visits_min: int = 3
    visits_max: int = 7
    visit_gap_mean: float = 100.0
    visit_gap_jitter: float = 20.0
    n_channels: int = 6
    signal: SignalSpec = field(default_factory=lambda: SignalSpec(below={"ch00": (0.5, -1.0)}))
    per_question: dict = field(default_factory=dict)
    low_state_prob: float = 0.3
    sensor_missing_frac: float = 0.1
    late_sensor_frac: float = 0.15
    early_sensor_end_frac: float = 0.15
    self_fraction: float = 0.5
    self_gap_days: int = 30
    disagreement_fraction: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.n_patients < 1 or self.n_channels < 1:
            raise ConfigError("n_patients and n_channels must be positive")
        if not 2 <= self.visits_min <= self.visits_max:
            raise ConfigError("need 2 <= visits_min <= visits_max")
        if self.signal.noise_std < 0 or any(s.noise_std < 0 for s in self.per_question.values()):
            raise ConfigError("noise_std must be non-negative")
        for name, frac in [
            ("low_state_prob", self.low_state_prob),
            ("sensor_missing_frac", self.sensor_missing_frac),
            ("self_fraction", self.self_fraction),
            ("disagreement_fraction", self.disagreement_fraction),
        ]:
            if not 0.0 <= frac <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def spec_for(self, q: int) -> SignalSpec:
        return self.per_question.get(q, self.signal)

    @property
    def channels(self) -> list[str]:
        return [f"ch{i:02d}" for i in range(self.n_channels)]


# daily level of a channel in the "low" / "high" window state
LOW_LEVEL, HIGH_LEVEL, DAILY_SD = 0.3, 0.7, 0.05
STATIC_MEANS = {"age_at_diagnosis": (60.0, 10.0), "fvc": (85.0, 15.0)}


@dataclass
class SynthCohort:
    static_rows: list[dict]
    visit_rows: list[dict]
    sensor_rows: list[dict]
    manifest: dict


def generate(config: SynthConfig) -> SynthCohort:
    rng = substream(config.seed, "synth")
    channels = config.channels
    static_rows, visit_rows, sensor_rows = [], [], []
    truth = []
    for i in range(config.n_patients):
        pid = f"P{i:04d}"
        age = float(np.round(rng.normal(*STATIC_MEANS["age_at_diagnosis"]), 1))
        fvc = float(np.round(rng.normal(*STATIC_MEANS["fvc"]), 1))
        sex = "F" if rng.random() < 0.5 else "M"
        onset = "bulbar" if rng.random() < 0.3 else "spinal"
        static = {"age_at_diagnosis": age, "fvc": fvc}
        static_z = {k: (v - STATIC_MEANS[k][0]) / STATIC_MEANS[k][1] for k, v in static.items()}
        row = {"patient_id": pid, "age_at_diagnosis": age, "fvc": fvc, "sex": sex, "onset_site": onset}
        # a few missing static cells exercise imputation
        if rng.random() < 0.05:
            row["fvc"] = None
        static_rows.append(row)

        n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
        first = int(rng.integers(30, 600))
        gaps = np.maximum(
            30, np.round(rng.normal(config.visit_gap_mean, config.visit_gap_jitter, n_visits - 1))
        ).astype(int)
        days = [first] + [int(first + g) for g in np.cumsum(gaps)]

        # sensor coverage
        start = first - int(rng.integers(0, 30))
        if n_visits >= 3 and rng.random() < config.late_sensor_frac:
            start = int(rng.integers(days[1] + 1, days[2]))
        end = days[-1]
        if rng.random() < config.early_sensor_end_frac:
            end = days[-1] - int(rng.integers(10, 90))
        end = max(end, start + 1)

        # window states: window k covers [days[k-1], days[k]); pre-first-visit days use window 1
        low = rng.random(n_visits - 1) < config.low_state_prob
        levels = {ch: rng.normal(0.5, 0.1, n_visits - 1) for ch in channels}
        for ch in config.signal.below:
            levels[ch] = np.where(low, LOW_LEVEL, HIGH_LEVEL)
        sensor_days = np.arange(max(start, 0), end + 1)
        keep = rng.random(sensor_days.size) >= config.sensor_missing_frac
        sensor_days = sensor_days[keep]
        widx = np.clip(np.searchsorted(np.array(days), sensor_days, side="right") - 1, 0, n_visits - 2)
        values = {}
        for ch in channels:
            v = levels[ch][widx] + rng.normal(0.0, DAILY_SD, sensor_days.size)
            values[ch] = np.round(v, 6)
            for d, x in zip(sensor_days, values[ch]):
                sensor_rows.append({"patient_id": pid, "day": int(d), "channel": ch, "value": float(x)})

        def window_mean(ch, k):
            m = (sensor_days >= days[k - 1]) & (sensor_days < days[k])
            return float(values[ch][m].mean()) if m.any() else float(levels[ch][k - 1])

        scores = {q: [int(rng.choice([4, 4, 4, 3, 3, 2]))] for q in QUESTIONS}
        for k in range(1, n_visits):
            for q in QUESTIONS:
                spec = config.spec_for(q)
                prev = scores[q][-1]
                raw = spec.intercept + spec.previous * prev
                for ch, (thr, coef) in spec.below.items():
                    raw += coef * (window_mean(ch, k) < thr)
                for ch, coef in spec.linear.items():
                    raw += coef * (window_mean(ch, k) - 0.5)
                for name, coef in spec.static.items():
                    raw += coef * static_z[name]
                if spec.noise_std > 0:
                    raw += rng.normal(0.0, spec.noise_std)
                scores[q].append(int(np.clip(round_half_away(raw), 0, 4)))
                truth.append({"patient_id": pid, "question": q, "window_start": days[k - 1],
                              "window_end": days[k], "latent": float(raw)})
        for k, d in enumerate(days):
            vr = {"patient_id": pid, "day": int(d), "source": CLINICIAN}
            vr.update({f"q{q}": scores[q][k] for q in QUESTIONS})
            visit_rows.append(vr)

        if rng.random() < config.self_fraction:
            disagree = {q: rng.random() < config.disagreement_fraction for q in QUESTIONS}
            d = days[0] + int(rng.integers(1, config.self_gap_days))
            while d < days[-1]:
                k = int(np.searchsorted(np.array(days), d, side="right") - 1)
                vr = {"patient_id": pid, "day": int(d), "source": SELF}
                for q in QUESTIONS:
                    s = scores[q][k]
                    if disagree[q]:
                        # far end of the scale from this patient's clinician scores
                        s = 0 if np.mean(scores[q]) >= 2 else 4
                    vr[f"q{q}"] = s
                visit_rows.append(vr)
                d += config.self_gap_days + int(rng.integers(-5, 6))

    visit_rows.sort(key=lambda r: (r["patient_id"], r["day"], r["source"]))
    manifest = {
        "config": _config_dict(config),
        "channels": channels,
        "low_level": LOW_LEVEL,
        "high_level": HIGH_LEVEL,
        "static_standardization": {k: list(v) for k, v in STATIC_MEANS.items()},
        "windows": truth,
    }
    return SynthCohort(static_rows, visit_rows, sensor_rows, manifest)


def _config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["per_question"] = {str(k): asdict(v) for k, v in config.per_question.items()}
    return d


STATIC_COLUMNS = ["patient_id", "age_at_diagnosis", "fvc", "sex", "onset_site"]
VISIT_COLUMNS = ["patient_id", "day", "source"] + [f"q{q}" for q in QUESTIONS]
SENSOR_COLUMNS = ["patient_id", "day", "channel", "value"]


def write_cohort(cohort: SynthCohort, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {
        "static": out / "static.csv",
        "visits": out / "visits.csv",
        "sensors": out / "sensors.csv",
        "manifest": out / "manifest.json",
    }
    write_csv(paths["static"], cohort.static_rows, STATIC_COLUMNS)
    write_csv(paths["visits"], cohort.visit_rows, VISIT_COLUMNS)
    write_csv(paths["sensors"], cohort.sensor_rows, SENSOR_COLUMNS)
    atomic_write_text(paths["manifest"], json.dumps(cohort.manifest, indent=1, sort_keys=True) + "\n")
    return paths


def config_from_mapping(m: dict) -> SynthConfig:
    """Build a config from flat string/number settings (CLI and config files)."""
    kw = {}
    sig = {}
    for key, val in m.items():
        if key in ("noise_std", "signal_previous", "signal_intercept"):
            sig[{"noise_std": "noise_std", "signal_previous": "previous", "signal_intercept": "intercept"}[key]] = float(val)
        elif key == "signal_below":
            sig["below"] = _parse_terms(val, pair=True)
        elif key == "signal_linear":
            sig["linear"] = _parse_terms(val)
        elif key == "signal_static":
            sig["static"] = _parse_terms(val)
        elif key in SynthConfig.__dataclass_fields__ and key not in ("signal", "per_question"):
            ftype = type(getattr(SynthConfig(), key))
            kw[key] = ftype(val)
        else:
            raise ConfigError(f"unknown synth setting {key!r}")
    if sig:
        base = asdict(SynthConfig().signal)
        base.update(sig)
        base["below"] = {k: tuple(v) for k, v in base["below"].items()}
        kw["signal"] = SignalSpec(**base)
    return SynthConfig(**kw)


def _parse_terms(text, pair: bool = False) -> dict:
    """``ch00:0.5:-1;ch01:-0.2`` style term lists; empty string means none."""
    if isinstance(text, dict):
        return text
    out = {}
    for item in filter(None, (t.strip() for t in str(text).split(";"))):
        parts = item.split(":")
        try:
            if pair:
                out[parts[0]] = (float(parts[1]), float(parts[2]))
            else:
                out[parts[0]] = float(parts[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"cannot parse signal term {item!r}") from exc
    return out
