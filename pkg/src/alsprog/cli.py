"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 numerical failure. Failures print one line to stderr:

    alsprog: error code=<n> kind=<kind> [path=<json string>] message=<json string>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import __version__
from .config import PIPELINE_KEYS, SYNTH_KEYS, build_config
from .core import AlsprogError, ConfigError, DataValidationError, NumericalError
from .stages import STAGES, Workspace, predict_files, run_pipeline, run_stage

log = logging.getLogger("alsprog")

KINDS = {ConfigError: "config", DataValidationError: "data_validation", NumericalError: "numerical"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for bad data here
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, synth: bool) -> None:
    p.add_argument("--config", help="key/value config file ([pipeline] and [synth] sections)")
    g = p.add_argument_group("pipeline settings (override the config file)")
    for k in PIPELINE_KEYS:
        g.add_argument("--" + k.name.replace("_", "-"), dest=f"p_{k.name}", metavar="V",
                       help=f"{k.help} (default: {k.default or 'empty'})")
    g.add_argument("--raw-metrics", action="store_true", help="score raw predictions (metric_mode=raw)")
    if synth:
        s = p.add_argument_group("synthetic cohort settings")
        for k in SYNTH_KEYS:
            s.add_argument("--synth-" + k.name.replace("_", "-"), dest=f"s_{k.name}", metavar="V",
                           help=f"(default: {k.default or 'empty'})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alsprog", description="ALSFRS-R progression pipeline")
    parser.add_argument("--version", action="version", version=f"alsprog {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=1, help="worker threads for training (default 1)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic cohort into <output_dir>/data (or --input-dir)",
        "ingest": "validate the cohort, split patients, impute static fields",
        "align": "apply sensor/visit alignment rules and write the audit table",
        "augment": "chi-squared merge decisions for self-assessment series",
        "extract": "build per-window feature tables",
        "select-features": "relevance tables (Spearman + BY) on development rows",
        "train": "nested-CV model selection per question and final refits",
        "evaluate": "score the bundle and the naive baseline on held-out patients",
        "report": "importance tables, model comparison and figures",
        "pipeline": "run every stage in order",
    }
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=helps[name])
        _add_config_flags(p, synth=name in ("synth", "pipeline"))
        p.add_argument("--threads", type=int, default=None, dest="sub_threads", help=argparse.SUPPRESS)
        p.add_argument("-v", "--verbose", action="count", default=0, dest="sub_verbose", help=argparse.SUPPRESS)
    p = sub.add_parser("predict", help="apply a trained bundle to feature tables")
    p.add_argument("--bundle", required=True, help="bundle directory (the train stage output)")
    p.add_argument("--features", required=True, action="append", help="feature table CSV; repeat per mode")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    return parser


def _config_from_args(args):
    over = {k.name: getattr(args, f"p_{k.name}") for k in PIPELINE_KEYS}
    if getattr(args, "raw_metrics", False):
        over["metric_mode"] = "raw"
    syn = {k.name: getattr(args, f"s_{k.name}", None) for k in SYNTH_KEYS}
    return build_config(args.config, over, syn)


def _summary(result) -> str:
    def default(o):
        if hasattr(o, "__dict__"):
            return vars(o)
        if hasattr(o, "_asdict"):
            return o._asdict()
        return str(o)

    return json.dumps(result, default=default, sort_keys=True)


def _fail(code: int, kind: str, message: str, path=None) -> int:
    parts = [f"alsprog: error code={code} kind={kind}"]
    if path is not None:
        parts.append(f"path={json.dumps(str(path))}")
    parts.append(f"message={json.dumps(' '.join(str(message).split()))}")
    print(" ".join(parts), file=sys.stderr)
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    if args.command is None:
        parser.print_help(sys.stderr)
        return _fail(1, "usage", "a command is required")
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose + getattr(args, "sub_verbose", 0), 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = getattr(args, "sub_threads", None) or args.threads
    if threads < 1:
        return _fail(1, "usage", "--threads must be at least 1")
    try:
        if args.command == "predict":
            n = predict_files(args.bundle, args.features, args.out)
            result = {"predictions": n}
        else:
            ws = Workspace(_config_from_args(args))
            if args.command == "pipeline":
                result = run_pipeline(ws, threads)
            else:
                result = run_stage(ws, args.command, threads)
    except AlsprogError as exc:
        kind = next((v for k, v in KINDS.items() if isinstance(exc, k)), "error")
        path = getattr(exc, "path", None)
        msg = getattr(exc, "reason", None) or str(exc)
        return _fail(exc.exit_code, kind, msg, path)
    print(_summary(result))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
