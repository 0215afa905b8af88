"""``fairrank`` command line: synth, convert, calibrate, evaluate, sweep, coverage.

Settings resolve as flag > config file (``--config``) > built-in default.
The config file holds ``key = value`` lines named like the flags, e.g.::

    # fairrank.conf
    k = 5
    bound = "dkwm"
    alpha-rel = 0.9
"""

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ValidationError
from .dataset import (
    ParseError,
    SplitSpec,
    filter_no_relevant,
    parse_jsonl,
    parse_svmlight,
    write_jsonl,
)
from .harness import (
    AlphaMode,
    SynthSpec,
    emit_report,
    generate_synthetic,
    run_coverage,
    run_tradeoff_sweep,
)
from .metrics import deterministic_evaluation, evaluate, metrics_json, write_metrics_csv
from .plmodel import NormalizationStats, TplConfig, fit_normalization, rc_table
from .riskcontrol import RiskSpec, build_risk_curve, make_grid, select_threshold

logger = logging.getLogger("fairrank")

SUBCOMMANDS = ("synth", "convert", "calibrate", "evaluate", "sweep", "coverage")
EXIT_OK, EXIT_ERROR, EXIT_ALL_ABSTAINED = 0, 1, 2

DEFAULTS = {
    "input": None,
    "scores": None,
    "format": "jsonl",
    "k": 5,
    "tau": 1.0,
    "mc_samples": 100,
    "alpha": None,
    "alpha_rel": None,
    "delta": 0.1,
    "bound": "hb",
    "grid_points": 101,
    "grid_mode": "uniform",
    "trials": 100,
    "cal_fraction": 0.25,
    "seed": None,
    "threads": None,
    "out": None,
    "out_format": "json",
    "min_grade": 1,
    "dkwm_const": 1.0,
    "lambda_": None,
    "calibration": None,
    "num_queries": 2000,
    "min_docs": 5,
    "max_docs": 20,
    "sigma": 0.5,
    "tie_prob": 0.5,
}
DEFAULT_ALPHA = 0.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits 1 (not 2) on usage errors; 2 is reserved."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _dkwm_const(text):
    return text if text == "auto" else float(text)


def build_parser():
    parser = _Parser(prog="fairrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fairrank {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="key = value settings file (flags override it)")
    g.add_argument("--input", help="dataset path (JSONL or SVMLight features)")
    g.add_argument("--scores", help="score sidecar for SVMLight input")
    g.add_argument("--format", choices=("jsonl", "svmlight"))
    g.add_argument("--k", type=int, help="ranking cutoff K (default 5)")
    g.add_argument("--tau", type=float, help="softmax temperature (default 1.0)")
    g.add_argument("--mc-samples", type=int, help="sampled rankings per query (default 100)")
    g.add_argument("--alpha", type=float, help="absolute target risk level")
    g.add_argument("--alpha-rel", type=float,
                   help="relative target: alpha = 1 - rho * deterministic NDCG@K")
    g.add_argument("--delta", type=float, help="tolerance (default 0.1)")
    g.add_argument("--bound", choices=("hb", "dkwm"))
    g.add_argument("--grid-points", type=int, help="threshold candidates (default 101)")
    g.add_argument("--grid-mode", choices=("uniform", "quantile"))
    g.add_argument("--trials", type=int, help="coverage trials (default 100)")
    g.add_argument("--cal-fraction", type=float, help="calibration share (default 0.25)")
    g.add_argument("--seed", type=int, help="master seed; drawn from OS entropy if absent")
    g.add_argument("--threads", type=int, help="parallel trials (default: all cores)")
    g.add_argument("--out", help="output path (stdout if absent)")
    g.add_argument("--out-format", choices=("json", "csv"))
    g.add_argument("--min-grade", type=int, help="grade counted as relevant (default 1)")
    g.add_argument("--dkwm-const", type=_dkwm_const, help="DKWM constant or 'auto'")
    g.add_argument("--lambda", dest="lambda_", type=float, help="threshold for evaluate")
    g.add_argument("--calibration", help="calibration JSON for evaluate")
    g.add_argument("--num-queries", type=int)
    g.add_argument("--min-docs", type=int)
    g.add_argument("--max-docs", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--tie-prob", type=float)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    helps = {
        "synth": "write a synthetic JSONL dataset",
        "convert": "convert SVMLight features + scores to JSONL",
        "calibrate": "select a risk-controlling threshold",
        "evaluate": "NDCG / risk / disparity at a threshold",
        "sweep": "metrics over a threshold grid",
        "coverage": "repeated-split coverage experiment",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def read_config_file(path):
    """Parse ``key = value`` lines; values are JSON literals or bare strings."""
    settings = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lambda_"
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            settings[key] = json.loads(value)
        except json.JSONDecodeError:
            settings[key] = value
    return settings


def resolve_settings(args):
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None}
    from_file = read_config_file(args.config) if args.config else {}
    settings = {**DEFAULTS, **from_file, **flags}
    if settings["seed"] is None:
        settings["seed"] = int(np.random.SeedSequence().entropy % 2**63)
        logger.info("no --seed given; drew seed %d from OS entropy", settings["seed"])
    if settings["threads"] is None:
        settings["threads"] = os.cpu_count() or 1
    return settings


def _tpl_config(s, lambdas=0.0):
    return TplConfig(k=s["k"], tau=s["tau"], lambdas=lambdas, m=s["mc_samples"])


def _alpha_mode(s):
    if s["alpha"] is not None and s["alpha_rel"] is not None:
        raise UsageError("give either --alpha or --alpha-rel, not both")
    if s["alpha_rel"] is not None:
        return AlphaMode.relative(s["alpha_rel"])
    return AlphaMode.absolute(DEFAULT_ALPHA if s["alpha"] is None else s["alpha"])


def _risk_spec(s, alpha):
    return RiskSpec(alpha=alpha, delta=s["delta"], bound=s["bound"], grid_mode=s["grid_mode"],
                    grid_points=s["grid_points"], dkwm_const=s["dkwm_const"])


def validate_settings(s):
    """Check every numeric setting against its owning type before any work starts."""
    _tpl_config(s)
    mode = _alpha_mode(s)
    _risk_spec(s, DEFAULT_ALPHA if mode.kind == "relative" else min(mode.value, 1 - 1e-9))
    SplitSpec(s["cal_fraction"], s["seed"] % 2**64, 0)
    if s["trials"] < 1:
        raise ValidationError("--trials must be >= 1")
    if s["threads"] < 1:
        raise ValidationError("--threads must be >= 1")


def load_dataset(s, filtered=True):
    if s["input"] is None:
        raise UsageError("--input is required")
    fmt = s["format"]
    if s["scores"] is not None and fmt == "jsonl":
        fmt = "svmlight"
    if fmt == "svmlight":
        if s["scores"] is None:
            raise UsageError("--scores is required for svmlight input")
        coll = parse_svmlight(s["input"], s["scores"])
    else:
        coll = parse_jsonl(s["input"])
    if filtered:
        coll, removed = filter_no_relevant(coll, s["min_grade"])
        logger.info("loaded %d queries (%d without relevant documents removed)", len(coll), removed)
    if len(coll) == 0:
        raise ValidationError("no queries left after filtering")
    return coll


def _stamp(payload):
    payload["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return payload


def _write_text(s, text):
    if s["out"] is None:
        sys.stdout.write(text)
    else:
        Path(s["out"]).write_text(text, encoding="utf-8")


def _json_settings(s):
    return {k: v for k, v in s.items() if k not in ("threads",)}


def cmd_synth(s):
    if s["out"] is None:
        raise UsageError("synth needs --out")
    spec = SynthSpec(num_queries=s["num_queries"], min_docs=s["min_docs"], max_docs=s["max_docs"],
                     sigma=s["sigma"], tie_cluster_prob=s["tie_prob"], seed=s["seed"] % 2**64)
    coll = generate_synthetic(spec)
    write_jsonl(coll, s["out"])
    logger.info("wrote %d synthetic queries to %s", len(coll), s["out"])
    return EXIT_OK


def cmd_convert(s):
    if s["out"] is None:
        raise UsageError("convert needs --out")
    coll = load_dataset({**s, "format": "svmlight"}, filtered=False)
    write_jsonl(coll, s["out"])
    logger.info("converted %d queries to %s", len(coll), s["out"])
    return EXIT_OK


def cmd_calibrate(s):
    coll = load_dataset(s)
    stats = fit_normalization(coll)
    table = rc_table(coll, stats, s["tau"], on_degenerate="uniform")
    base = _tpl_config(s)
    mode = _alpha_mode(s)
    alpha = mode.resolve(deterministic_evaluation(coll, table, base).mean_ndcg)
    spec = _risk_spec(s, alpha)
    curve = build_risk_curve(coll, table, base, spec, seed=s["seed"])
    result = select_threshold(curve, spec)
    payload = result.to_dict()
    payload["effective_lambda"] = result.effective_lambda
    payload["alpha_mode"] = {"kind": mode.kind, "value": mode.value}
    payload["normalization"] = {"mean": stats.mean, "std": stats.std, "tau": s["tau"], "k": s["k"],
                                "p_max_global": table.p_max_global}
    payload["settings"] = _json_settings(s)
    _write_text(s, json.dumps(_stamp(payload), indent=2) + "\n")
    logger.info("calibration outcome: %s (lambda=%s)", result.outcome, result.effective_lambda)
    return EXIT_OK


def cmd_evaluate(s):
    coll = load_dataset(s)
    if s["calibration"] is not None:
        cal = json.loads(Path(s["calibration"]).read_text(encoding="utf-8"))
        norm = cal["normalization"]
        stats = NormalizationStats(norm["mean"], norm["std"])
        lam = cal["effective_lambda"] if s["lambda_"] is None else s["lambda_"]
        p_max = norm.get("p_max_global")
    else:
        if s["lambda_"] is None:
            raise UsageError("evaluate needs --lambda or --calibration")
        stats, lam, p_max = fit_normalization(coll), s["lambda_"], None
    table = rc_table(coll, stats, s["tau"], p_max, on_degenerate="uniform")
    result = evaluate(coll, table, _tpl_config(s, lam), seed=s["seed"])
    if s["out_format"] == "csv":
        if s["out"] is None:
            raise UsageError("csv output needs --out")
        write_metrics_csv(result, s["out"])
    else:
        payload = json.loads(metrics_json(result))
        payload["lambda"] = lam
        payload["settings"] = _json_settings(s)
        _write_text(s, json.dumps(_stamp(payload), indent=2) + "\n")
    return EXIT_OK


def _emit(s, report):
    if s["out"] is None:
        payload = _stamp(report.to_dict())
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    elif s["out_format"] == "json":
        payload = _stamp(report.to_dict())
        Path(s["out"]).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    else:
        emit_report(report, s["out"], "csv")


def cmd_sweep(s):
    coll = load_dataset(s)
    stats = fit_normalization(coll)
    grid = make_grid(rc_table(coll, stats, s["tau"], on_degenerate="uniform"),
                     s["grid_mode"], s["grid_points"])
    curve = run_tradeoff_sweep(coll, _tpl_config(s), grid, seed=s["seed"])
    _emit(s, curve)
    return EXIT_OK


def cmd_coverage(s):
    coll = load_dataset(s)
    mode = _alpha_mode(s)
    spec = _risk_spec(s, DEFAULT_ALPHA if mode.kind == "relative" else mode.resolve(0.0))
    report = run_coverage(coll, mode, spec, trials=s["trials"],
                          split_template=SplitSpec(s["cal_fraction"], s["seed"] % 2**64),
                          config=_tpl_config(s), threads=s["threads"])
    _emit(s, report)
    logger.info("coverage %s (all trials %.3f), abstentions %d/%d", report.coverage_rate,
                report.coverage_rate_all, report.abstentions, report.trials)
    return EXIT_ALL_ABSTAINED if report.all_abstained else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "convert": cmd_convert,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "coverage": cmd_coverage,
}


def configure_logging():
    level = os.environ.get("FAIRRANK_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve_settings(args)
        validate_settings(settings)
        logger.info("resolved config: %s", json.dumps({"command": args.command, **settings},
                                                      sort_keys=True))
        return COMMANDS[args.command](settings)
    except (UsageError, ValidationError, ParseError, OSError, ValueError, KeyError) as exc:
        logger.error("%s", exc)
        parser.print_usage(sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
