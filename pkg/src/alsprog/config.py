"""Pipeline configuration: an INI-style key/value file plus flag overrides.

The file has a ``[pipeline]`` section and an optional ``[synth]`` section.
Every key has a documented default (see ``PIPELINE_KEYS``/``SYNTH_KEYS``)
and unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .core import ConfigError
from .featurize import FEATURE_MODES, SelectionSettings
from .synth import SynthConfig, config_from_mapping


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_LOGSPACE = re.compile(r"^\s*logspace\(\s*([^,]+),([^,]+),([^,)]+)\)\s*$")


def parse_grid(text) -> tuple[float, ...]:
    """``logspace(a, b, n)`` (base 10) or a comma-separated list of numbers."""
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    m = _LOGSPACE.match(str(text))
    if m:
        lo, hi, n = float(m.group(1)), float(m.group(2)), int(m.group(3))
        if n < 1:
            raise ValueError("logspace needs at least one point")
        return tuple(float(v) for v in np.logspace(lo, hi, n))
    vals = tuple(float(v) for v in str(text).split(",") if v.strip())
    if not vals:
        raise ValueError("empty grid")
    return vals


def _names(allowed) -> Callable[[Any], tuple[str, ...]]:
    def parse(text):
        items = text if isinstance(text, (list, tuple)) else str(text).split(",")
        out = tuple(dict.fromkeys(s.strip() for s in items if s.strip()))
        bad = [s for s in out if s not in allowed]
        if bad or not out:
            raise ValueError(f"expected a comma list from {sorted(allowed)}, got {text!r}")
        return out

    return parse


def _choice(allowed) -> Callable[[Any], str]:
    def parse(text):
        t = str(text).strip()
        if t not in allowed:
            raise ValueError(f"expected one of {sorted(allowed)}, got {text!r}")
        return t

    return parse


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[Any], Any]
    default: str
    help: str


PIPELINE_KEYS = [
    Key("input_dir", str, "", "cohort directory with static.csv, visits.csv, sensors.csv; empty = synthesize into <output_dir>/data"),
    Key("output_dir", str, "alsprog-run", "artifact root"),
    Key("seed", int, "0", "top-level seed for every random substream"),
    Key("holdout_frac", float, "0.2", "fraction of patients held out for evaluate"),
    Key("tail_max_gap_days", int, "60", "largest gap after the last sensor day for a kept tail visit"),
    Key("augmentation", _bool, "true", "train also on self-report augmented timelines"),
    Key("augment_alpha", float, "0.05", "chi-squared level below which a self series is rejected"),
    Key("horizon_min_days", int, "90", "minimum target distance on augmented timelines"),
    Key("feature_modes", _names(FEATURE_MODES), "median,catalog", "sensor feature sets to try"),
    Key("selection_mode", _choice(("keep_all", "top_k")), "keep_all", "relevance selection rule"),
    Key("fdr_level", float, "0.05", "BY-adjusted p threshold in keep_all mode"),
    Key("top_k", int, "10", "number of features kept in top_k mode"),
    Key("max_missing_frac", float, "0.3", "prune sensor columns missing in more rows than this"),
    Key("min_variance", float, "1e-12", "prune sensor columns with smaller variance"),
    Key("models", _names(("elasticnet", "lasso")), "elasticnet,lasso", "regularized model kinds"),
    Key("lambdas", parse_grid, "logspace(-4, 1, 20)", "penalty grid"),
    Key("alphas", parse_grid, "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0", "L1 mixing grid for elasticnet"),
    Key("outer_k", int, "10", "outer cross-validation folds"),
    Key("inner_k", int, "5", "inner cross-validation folds"),
    Key("tol", float, "1e-6", "solver tolerance for refits"),
    Key("grid_tol", float, "1e-4", "solver tolerance inside inner-fold grid paths"),
    Key("max_iter", int, "10000", "solver sweep limit"),
    Key("metric_mode", _choice(("rounded", "raw")), "rounded", "score post-processed or raw predictions"),
]

# synth keys map onto SynthConfig; seed comes from [pipeline]
_SYNTH_DEFAULTS = SynthConfig()
SYNTH_KEYS = [
    Key(name, str, str(getattr(_SYNTH_DEFAULTS, name)), "synthetic cohort setting")
    for name in SynthConfig.__dataclass_fields__
    if name not in ("signal", "per_question", "seed")
] + [
    Key("noise_std", str, str(_SYNTH_DEFAULTS.signal.noise_std), "latent noise standard deviation"),
    Key("signal_previous", str, "1.0", "coefficient on the previous score"),
    Key("signal_intercept", str, "0.0", "latent intercept"),
    Key("signal_below", str, "ch00:0.5:-1.0", "channel:threshold:coef terms, ';'-separated"),
    Key("signal_linear", str, "", "channel:coef terms on the centered window mean"),
    Key("signal_static", str, "", "field:coef terms on standardized static fields"),
]

_PKEYS = {k.name: k for k in PIPELINE_KEYS}
_SKEYS = {k.name: k for k in SYNTH_KEYS}
# keys that change wall time or file placement but never results
_UNHASHED = ("output_dir", "input_dir")


@dataclass(frozen=True)
class PipelineConfig:
    values: Mapping[str, Any]
    synth: Mapping[str, str] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def output(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def data_sources(self) -> tuple[str, ...]:
        return ("clinical", "augmented") if self.values["augmentation"] else ("clinical",)

    def selection(self) -> SelectionSettings:
        v = self.values
        return SelectionSettings(
            v["selection_mode"], v["fdr_level"], v["top_k"], v["max_missing_frac"], v["min_variance"]
        )

    def synth_config(self) -> SynthConfig:
        settings = {k: v for k, v in self.synth.items() if v != _SKEYS[k].default}
        settings["seed"] = self.values["seed"]
        return config_from_mapping(settings)

    def canonical(self) -> dict:
        """JSON-ready resolved settings that determine results."""
        pv = {k: v for k, v in self.values.items() if k not in _UNHASHED}
        pv = {k: list(v) if isinstance(v, tuple) else v for k, v in pv.items()}
        return {"pipeline": pv, "synth": dict(self.synth)}

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _parse_key(key: Key, raw, section: str):
    try:
        return key.parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key.name}: {exc}") from None


def read_config_file(path) -> tuple[dict[str, str], dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from None
    extra = [s for s in parser.sections() if s not in ("pipeline", "synth")]
    if extra:
        raise ConfigError(f"unknown config section(s) {extra}")
    pipe = dict(parser["pipeline"]) if parser.has_section("pipeline") else {}
    syn = dict(parser["synth"]) if parser.has_section("synth") else {}
    return pipe, syn


def build_config(
    path=None,
    overrides: Optional[Mapping[str, Any]] = None,
    synth_overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """Defaults, then file values, then flag overrides (flags win)."""
    file_p, file_s = read_config_file(path) if path else ({}, {})
    for section, given, known in (("pipeline", file_p, _PKEYS), ("synth", file_s, _SKEYS)):
        unknown = sorted(set(given) - set(known))
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    raw_p = {k.name: k.default for k in PIPELINE_KEYS}
    raw_p.update(file_p)
    raw_p.update({k: v for k, v in (overrides or {}).items() if v is not None})
    raw_s = {k.name: k.default for k in SYNTH_KEYS}
    raw_s.update(file_s)
    raw_s.update({k: str(v) for k, v in (synth_overrides or {}).items() if v is not None})
    for k in set(raw_p) - set(_PKEYS):
        raise ConfigError(f"unknown pipeline setting {k!r}")
    values = {k: _parse_key(_PKEYS[k], raw_p[k], "pipeline") for k in _PKEYS}
    _validate(values)
    cfg = PipelineConfig(values, {k: str(raw_s[k]) for k in sorted(raw_s)})
    cfg.synth_config()  # fail early on bad synth settings
    return cfg


def _validate(v: dict) -> None:
    if not 0.0 <= v["holdout_frac"] < 1.0:
        raise ConfigError("holdout_frac must lie in [0, 1)")
    if not 0.0 < v["augment_alpha"] < 1.0:
        raise ConfigError("augment_alpha must lie in (0, 1)")
    if not 0.0 < v["fdr_level"] <= 1.0:
        raise ConfigError("fdr_level must lie in (0, 1]")
    if v["top_k"] < 1:
        raise ConfigError("top_k must be at least 1")
    if v["tail_max_gap_days"] < 0 or v["horizon_min_days"] < 1:
        raise ConfigError("tail_max_gap_days must be >= 0 and horizon_min_days >= 1")
    if any(lam < 0 for lam in v["lambdas"]):
        raise ConfigError("lambdas must be non-negative")
    if any(not 0.0 <= a <= 1.0 for a in v["alphas"]):
        raise ConfigError("alphas must lie in [0, 1]")
    if v["tol"] <= 0 or v["grid_tol"] <= 0 or v["max_iter"] < 1:
        raise ConfigError("tol and grid_tol must be positive, max_iter at least 1")


def render_config(cfg: PipelineConfig, paths: bool = True) -> str:
    """The resolved configuration as a config file (round-trips through build_config).

    ``paths=False`` leaves out input/output directories.
    """
    lines = ["[pipeline]"]
    for k in PIPELINE_KEYS:
        if not paths and k.name in _UNHASHED:
            continue
        v = cfg.values[k.name]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{k.name} = {text}")
    lines.append("")
    lines.append("[synth]")
    lines.extend(f"{k} = {v}" for k, v in cfg.synth.items())
    return "\n".join(lines) + "\n"
