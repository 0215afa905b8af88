"""Repeated-split coverage experiments, threshold sweeps and a synthetic benchmark."""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import ValidationError, check_grid
from .dataset import Document, QueryCollection, ScoredQuery, SplitSpec, split
from .metrics import deterministic_evaluation, evaluate, level_statistics
from .plmodel import TplConfig, fit_normalization, rc_table
from .riskcontrol import (
    RiskSpec,
    abstention_fallback,
    curve_from_levels,
    resolve_grid,
    select_threshold,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ALPHA_CEILING = 1.0 - 1e-9


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic queries with ``score = gain_scale * rel + N(0, sigma)``.

    With probability ``tie_cluster_prob`` a query gets a cluster of
    ``cluster_size`` (at least 2) documents sharing one grade whose scores
    differ by at most ``0.01 * sigma``.
    """

    num_queries: int = 2000
    min_docs: int = 5
    max_docs: int = 20
    relevance_probs: tuple = (0.45, 0.25, 0.15, 0.1, 0.05)
    gain_scale: float = 1.0
    sigma: float = 0.5
    tie_cluster_prob: float = 0.5
    cluster_size: int = None
    seed: int = 0

    def __post_init__(self):
        probs = np.asarray(self.relevance_probs, dtype=float)
        if probs.shape != (5,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
            raise ValidationError("relevance_probs must be 5 non-negative values summing to 1")
        if probs[1:].sum() <= 0:
            raise ValidationError("relevance_probs must allow a relevant grade")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if self.gain_scale <= 0:
            raise ValidationError("gain_scale must be > 0 (scores increasing in grade)")
        if not 0.0 <= self.tie_cluster_prob <= 1.0:
            raise ValidationError("tie_cluster_prob must lie in [0, 1]")
        if not 1 <= self.min_docs <= self.max_docs:
            raise ValidationError("need 1 <= min_docs <= max_docs")
        if self.num_queries < 0:
            raise ValidationError("num_queries must be >= 0")
        if self.cluster_size is not None and self.cluster_size < 2:
            raise ValidationError("cluster_size must be >= 2")


def _synth_query(spec, index):
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed), spawn_key=(index,)))
    while True:
        n = int(rng.integers(spec.min_docs, spec.max_docs + 1))
        rel = rng.choice(5, size=n, p=spec.relevance_probs)
        scores = spec.gain_scale * rel + rng.normal(0.0, spec.sigma, size=n)
        if n >= 2 and rng.random() < spec.tie_cluster_prob:
            size = spec.cluster_size or int(rng.integers(2, min(4, n) + 1))
            size = min(size, n)
            members = rng.choice(n, size=size, replace=False)
            relevant = members[rel[members] > 0]
            grade = rel[relevant[0]] if relevant.size else int(rng.integers(1, 5))
            rel[members] = grade
            base = spec.gain_scale * grade + rng.normal(0.0, spec.sigma)
            scores[members] = base + rng.uniform(-0.01, 0.01, size=size) * spec.sigma
        if rel.max() > 0:
            break
    qid = f"q{index:06d}"
    return ScoredQuery(qid, [Document(f"d{j}", float(scores[j]), int(rel[j])) for j in range(n)])


def generate_synthetic(spec=SynthSpec()):
    queries = [_synth_query(spec, i) for i in range(spec.num_queries)]
    return QueryCollection(queries, provenance=f"synthetic:{json.dumps(asdict(spec))}")


# ------------------------------------------------------------------- coverage


@dataclass(frozen=True)
class AlphaMode:
    """``absolute``: fixed alpha. ``relative``: alpha = 1 - rho * (deterministic NDCG on calibration)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("absolute", "relative"):
            raise ValidationError(f"alpha mode must be 'absolute' or 'relative', got {self.kind!r}")
        if not 0.0 < self.value <= 1.0:
            raise ValidationError(f"{self.kind} alpha value must lie in (0, 1], got {self.value}")

    @classmethod
    def absolute(cls, alpha):
        return cls("absolute", float(alpha))

    @classmethod
    def relative(cls, rho):
        return cls("relative", float(rho))

    def resolve(self, deterministic_ndcg):
        alpha = self.value if self.kind == "absolute" else 1.0 - self.value * deterministic_ndcg
        return float(min(max(alpha, 1e-12), ALPHA_CEILING))


@dataclass
class TrialRecord:
    trial: int
    alpha: float
    lambda_hat: float
    abstained: bool
    test_ndcg: float
    test_risk: float
    test_disparity: float
    det_ndcg: float
    det_disparity: float
    cal_det_ndcg: float
    covered: bool


@dataclass
class CoverageReport:
    trials: int
    covered: int
    coverage_rate: float
    coverage_rate_all: float
    abstentions: int
    records: list
    settings: dict = field(default_factory=dict)

    @property
    def all_abstained(self):
        return self.abstentions == self.trials

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "coverage",
            "trials": self.trials,
            "covered": self.covered,
            "coverage_rate": self.coverage_rate,
            "coverage_rate_all": self.coverage_rate_all,
            "abstentions": self.abstentions,
            "settings": self.settings,
            "records": [asdict(r) for r in self.records],
        }


def trial_seed(master_seed, trial, purpose):
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(0xC0FE, int(trial), int(purpose)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % 2**63)


def _run_trial(collection, alpha_mode, spec, split_template, config, trial):
    master = split_template.seed
    cal, test = split(collection, replace(split_template, trial_index=trial))
    stats = fit_normalization(cal)
    cal_table = rc_table(cal, stats, config.tau, on_degenerate="uniform")
    test_table = rc_table(test, stats, config.tau, cal_table.p_max_global, on_degenerate="uniform")
    base = config.with_lambdas(0.0)

    cal_det = deterministic_evaluation(cal, cal_table, base)
    alpha = alpha_mode.resolve(cal_det.mean_ndcg)
    trial_spec = replace(spec, alpha=alpha)
    levels = level_statistics(cal, cal_table, base, seed=trial_seed(master, trial, 0))
    curve = curve_from_levels(levels, resolve_grid(trial_spec, cal_table))
    result = select_threshold(curve, trial_spec)
    lam = result.effective_lambda

    test_eval = evaluate(test, test_table, base.with_lambdas(lam), seed=trial_seed(master, trial, 1))
    det = deterministic_evaluation(test, test_table, base)
    record = TrialRecord(
        trial=trial,
        alpha=alpha,
        lambda_hat=result.lambda_hat,
        abstained=result.abstained,
        test_ndcg=test_eval.mean_ndcg,
        test_risk=test_eval.mean_risk,
        test_disparity=test_eval.mean_disparity,
        det_ndcg=det.mean_ndcg,
        det_disparity=det.mean_disparity,
        cal_det_ndcg=cal_det.mean_ndcg,
        covered=bool(test_eval.mean_risk <= alpha),
    )
    logger.info("trial %d: alpha=%.4f lambda_hat=%s test_risk=%.4f covered=%s",
                trial, alpha, result.lambda_hat, record.test_risk, record.covered)
    return record


def run_coverage(collection, alpha_mode, spec, trials=100, split_template=SplitSpec(),
                 config=TplConfig(), threads=1):
    """Calibrate on each random split and check the realized test risk against alpha.

    ``coverage_rate`` excludes abstained trials (``None`` if all abstained);
    ``coverage_rate_all`` counts them using the deterministic fallback.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if isinstance(alpha_mode, (int, float)):
        alpha_mode = AlphaMode.absolute(alpha_mode)

    def one(t):
        return _run_trial(collection, alpha_mode, spec, split_template, config, t)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(trials)))
    else:
        records = [one(t) for t in range(trials)]
    records.sort(key=lambda r: r.trial)
    active = [r for r in records if not r.abstained]
    covered = sum(r.covered for r in active)
    return CoverageReport(
        trials=trials,
        covered=covered,
        coverage_rate=covered / len(active) if active else None,
        coverage_rate_all=sum(r.covered for r in records) / trials,
        abstentions=trials - len(active),
        records=records,
        settings={
            "alpha_mode": alpha_mode.kind,
            "alpha_value": alpha_mode.value,
            "delta": spec.delta,
            "bound": spec.bound,
            "grid_mode": spec.grid_mode,
            "grid_points": spec.grid_points,
            "dkwm_const": spec.dkwm_const,
            "k": config.k,
            "tau": config.tau,
            "mc_samples": config.m,
            "calibration_fraction": split_template.calibration_fraction,
            "seed": split_template.seed,
            "provenance": collection.provenance,
        },
    )


# ------------------------------------------------------------------- tradeoff


@dataclass
class TradeoffCurve:
    lambdas: list
    mean_ndcg: list
    mean_risk: list
    mean_disparity: list
    mean_disparity_raw: list
    pl: dict = None
    deterministic: dict = None
    settings: dict = field(default_factory=dict)

    def rows(self):
        return [
            {"lambda": lam, "mean_ndcg": u, "mean_risk": r, "mean_disparity": d,
             "mean_disparity_raw": dr}
            for lam, u, r, d, dr in zip(self.lambdas, self.mean_ndcg, self.mean_risk,
                                        self.mean_disparity, self.mean_disparity_raw)
        ]

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "tradeoff",
            "settings": self.settings,
            "pl": self.pl,
            "deterministic": self.deterministic,
            "rows": self.rows(),
        }


def run_tradeoff_sweep(collection, config, lambda_grid, seed=0, reference=None):
    """NDCG, risk and disparity at each threshold, with common random numbers.

    ``pl`` and ``deterministic`` hold the same metrics from the plain PL
    evaluation path (threshold 0) and the score-sorted ranking, for checking
    the sweep endpoints.
    """
    grid = check_grid(lambda_grid)
    stats = fit_normalization(collection if reference is None else reference)
    table = rc_table(collection, stats, config.tau, on_degenerate="uniform")
    base = config.with_lambdas(0.0)
    levels = level_statistics(collection, table, base, seed=seed)
    curve = curve_from_levels(levels, grid)
    pl = evaluate(collection, table, base, seed=seed)
    det = deterministic_evaluation(collection, table, base)
    return TradeoffCurve(
        lambdas=grid.tolist(),
        mean_ndcg=(1.0 - curve.r_hat).tolist(),
        mean_risk=curve.r_hat.tolist(),
        mean_disparity=curve.disparity.tolist(),
        mean_disparity_raw=curve.disparity_raw.tolist(),
        pl=pl.summary(),
        deterministic=det.summary(),
        settings={"k": config.k, "tau": config.tau, "mc_samples": config.m, "seed": seed,
                  "p_max_global": table.p_max_global, "provenance": collection.provenance},
    )


# -------------------------------------------------------------------- reports

COVERAGE_CSV_HEADER = [
    "trial", "alpha", "lambda_hat", "abstained", "test_ndcg", "test_risk", "test_disparity",
    "det_ndcg", "det_disparity", "cal_det_ndcg", "covered",
]
TRADEOFF_CSV_HEADER = ["lambda", "mean_ndcg", "mean_risk", "mean_disparity", "mean_disparity_raw"]


def emit_report(report, path, fmt="json"):
    """Write a CoverageReport or TradeoffCurve as JSON or CSV."""
    path = Path(path)
    if isinstance(report, TradeoffCurve):
        if not report.lambdas:
            raise ValidationError("refusing to write an empty sweep")
        header, rows = TRADEOFF_CSV_HEADER, report.rows()
    elif isinstance(report, CoverageReport):
        header, rows = COVERAGE_CSV_HEADER, [asdict(r) for r in report.records]
    else:
        raise ValidationError(f"unsupported report type {type(report).__name__}")
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        elif fmt == "csv":
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# schema_version={SCHEMA_VERSION}\n")
                writer = csv.DictWriter(fh, fieldnames=header)
                writer.writeheader()
                writer.writerows(rows)
        else:
            raise ValidationError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
