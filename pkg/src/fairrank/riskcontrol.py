"""Threshold selection with a distribution-free guarantee on ranking risk.

The calibrated threshold ``lambda_hat`` satisfies
``P(risk(lambda_hat) <= alpha) >= 1 - delta`` over calibration draws, using
either Hoeffding-Bentkus p-values or a DKWM upper confidence bound on the
monotone envelope of the empirical risk curve.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, xlogy

from ._validation import ValidationError, check_grid, check_open_unit, check_positive_int
from .metrics import level_statistics

FALLBACK_LAMBDA = 1.0
BOUNDS = ("hb", "dkwm")
GRID_MODES = ("uniform", "quantile")


def h1(a, b):
    """Binary KL divergence ``a log(a/b) + (1-a) log((1-a)/(1-b))`` for ``a <= b``."""
    if not 0.0 <= a <= 1.0:
        raise ValidationError(f"h1: a must lie in [0, 1], got {a}")
    if not 0.0 < b < 1.0:
        raise ValidationError(f"h1: b must lie in (0, 1), got {b}")
    if a > b:
        raise ValidationError(f"h1: requires a <= b, got a={a}, b={b}; clamp a to min(a, b)")
    value = xlogy(a, a / b) + xlogy(1.0 - a, (1.0 - a) / (1.0 - b))
    return max(float(value), 0.0)


def log_binomial_tail(n, p, j):
    """``log P(Bin(n, p) <= j)`` by exact summation of the pmf in log space."""
    if n < 1 or int(n) != n:
        raise ValidationError(f"n must be a positive integer, got {n}")
    if not 0.0 < p < 1.0:
        raise ValidationError(f"p must lie in (0, 1), got {p}")
    if not 0 <= j <= n or int(j) != j:
        raise ValidationError(f"j must be an integer in [0, n], got {j}")
    n, j = int(n), int(j)
    if j == n:
        return 0.0
    i = np.arange(j, dtype=float)
    steps = np.log((n - i) / (i + 1.0)) + (math.log(p) - math.log1p(-p))
    logpmf = n * math.log1p(-p) + np.concatenate(([0.0], np.cumsum(steps)))
    return min(float(logsumexp(logpmf)), 0.0)


def binomial_tail(n, p, j):
    """``P(Bin(n, p) <= j)``."""
    return math.exp(log_binomial_tail(n, p, j))


def _ceil_count(n, r_hat):
    x = n * r_hat
    nearest = round(x)
    # n * r_hat is usually an integer count; do not let rounding noise bump it
    if abs(x - nearest) <= 1e-9 * max(1.0, x):
        return int(nearest)
    return int(math.ceil(x))


def hb_p_value(r_hat, n, alpha):
    """Hoeffding-Bentkus p-value for the null ``risk > alpha``."""
    if not 0.0 <= r_hat <= 1.0:
        raise ValidationError(f"r_hat must lie in [0, 1], got {r_hat}")
    check_positive_int(n, "n")
    check_open_unit(alpha, "alpha")
    log_hoeffding = -n * h1(min(r_hat, alpha), alpha)
    log_bentkus = 1.0 + log_binomial_tail(n, alpha, min(_ceil_count(n, r_hat), n))
    # keep the result strictly positive when the bound underflows float64
    return max(math.exp(min(log_hoeffding, log_bentkus)), math.ulp(0.0))


def dkwm_constant(loss_levels):
    """Sum of gaps between adjacent sorted distinct loss levels."""
    levels = np.asarray(loss_levels, dtype=float)
    if levels.size < 1:
        raise ValidationError("need at least one loss level")
    if np.any(np.diff(levels) <= 0):
        raise ValidationError("loss levels must be sorted ascending and distinct")
    return float(np.sum(np.abs(np.diff(levels))))


def dkwm_ucb(r_tilde, n, delta, const):
    """``r_tilde + const * sqrt(ln(2/delta) / (2n))``; not clipped to 1."""
    check_positive_int(n, "n")
    check_open_unit(delta, "delta")
    if const < 0:
        raise ValidationError(f"const must be >= 0, got {const}")
    return float(r_tilde + const * math.sqrt(math.log(2.0 / delta) / (2.0 * n)))


def dkwm_pvalue_criterion(r_hat, n, delta, const, alpha):
    """Diagnostic: ``alpha >= r_hat + 2 const sqrt(ln(1/delta) / (2n))``."""
    return bool(alpha >= r_hat + 2.0 * const * math.sqrt(math.log(1.0 / delta) / (2.0 * n)))


@dataclass(frozen=True)
class RiskSpec:
    alpha: float = 0.1
    delta: float = 0.1
    bound: str = "hb"
    grid: tuple = None
    grid_mode: str = "uniform"
    grid_points: int = 101
    dkwm_const: object = 1.0

    def __post_init__(self):
        check_open_unit(self.alpha, "alpha")
        check_open_unit(self.delta, "delta")
        if self.bound not in BOUNDS:
            raise ValidationError(f"bound must be one of {BOUNDS}, got {self.bound!r}")
        if self.grid_mode not in GRID_MODES:
            raise ValidationError(f"grid_mode must be one of {GRID_MODES}, got {self.grid_mode!r}")
        check_positive_int(self.grid_points, "grid_points")
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(check_grid(self.grid).tolist()))
        if self.dkwm_const != "auto" and not float(self.dkwm_const) >= 0:
            raise ValidationError("dkwm_const must be 'auto' or a non-negative number")


def make_grid(table, mode="uniform", points=101):
    """Candidate thresholds spanning ``[0, p_max]`` of a calibration RC table."""
    p_max = table.p_max_global
    if mode == "uniform":
        grid = np.linspace(0.0, p_max, points) if points > 1 else np.array([0.0])
    elif mode == "quantile":
        rc = np.concatenate([r.rc for r in table.rows.values()])
        grid = np.quantile(rc, np.linspace(0, 1, points))
        grid[0] = 0.0
    else:
        raise ValidationError(f"unknown grid mode {mode!r}")
    return check_grid(np.unique(grid))


def resolve_grid(spec, table):
    if spec.grid is not None:
        return np.asarray(spec.grid)
    return make_grid(table, spec.grid_mode, spec.grid_points)


def monotone_envelope(r_hat):
    """Smallest curve ``>= r_hat`` that is non-increasing in the threshold."""
    r_hat = np.asarray(r_hat, dtype=float)
    return np.maximum.accumulate(r_hat[::-1])[::-1]


@dataclass
class RiskCurve:
    lambdas: np.ndarray
    r_hat: np.ndarray
    r_tilde: np.ndarray
    n: int
    disparity: np.ndarray = None
    disparity_raw: np.ndarray = None
    loss_levels: np.ndarray = field(default=None, repr=False)


def curve_from_levels(levels, grid):
    """Aggregate per-query level statistics onto a threshold grid."""
    grid = check_grid(grid)
    if not levels:
        raise ValidationError("calibration set is empty")
    r_hat = np.zeros(len(grid))
    disp = np.zeros(len(grid))
    disp_raw = np.zeros(len(grid))
    losses = []
    for ls in levels:
        idx = ls.levels(grid) - 1
        r_hat += ls.loss[idx]
        disp += ls.disparity[idx]
        disp_raw += ls.disparity_raw[idx]
        losses.append(ls.loss[np.unique(idx)])
    q = len(levels)
    r_hat /= q
    return RiskCurve(
        lambdas=grid,
        r_hat=r_hat,
        r_tilde=monotone_envelope(r_hat),
        n=q,
        disparity=disp / q,
        disparity_raw=disp_raw / q,
        loss_levels=np.unique(np.round(np.concatenate(losses), 12)),
    )


def build_risk_curve(cal, table, config, spec, seed=0, exact=None):
    """Empirical and envelope risk (plus disparity) at every candidate threshold."""
    grid = resolve_grid(spec, table)
    levels = level_statistics(cal, table, config, seed=seed, exact=exact)
    return curve_from_levels(levels, grid)


@dataclass
class CalibrationResult:
    lambda_hat: float
    certified: list
    alpha: float
    delta: float
    bound: str
    n: int
    diagnostics: list
    dkwm_const: float = None

    @property
    def abstained(self):
        return self.lambda_hat is None

    @property
    def outcome(self):
        return "abstain" if self.abstained else "selected"

    @property
    def effective_lambda(self):
        return abstention_fallback() if self.abstained else self.lambda_hat

    def to_dict(self):
        out = {"outcome": self.outcome}
        if not self.abstained:
            out["lambda_hat"] = self.lambda_hat
        out.update({
            "alpha": self.alpha,
            "delta": self.delta,
            "bound": self.bound,
            "n": self.n,
            "dkwm_const": self.dkwm_const,
            "certified": list(self.certified),
            "grid": self.diagnostics,
        })
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("lambda_hat"), list(d.get("certified", [])), d["alpha"], d["delta"],
                   d["bound"], d["n"], d.get("grid", []), d.get("dkwm_const"))


def _resolve_const(spec, curve):
    if spec.dkwm_const == "auto":
        if curve.loss_levels is None or curve.loss_levels.size == 0:
            return 1.0
        return dkwm_constant(curve.loss_levels)
    return float(spec.dkwm_const)


def select_threshold(curve, spec, disparity_per_lambda=None):
    """Certify a suffix of the grid and return its smallest threshold.

    Candidates are tested from the largest threshold downward (fixed-sequence
    testing) and the scan stops at the first candidate that fails.
    """
    lambdas = np.asarray(curve.lambdas, dtype=float)
    if spec.grid is not None and not np.array_equal(lambdas, np.asarray(spec.grid)):
        raise ValidationError("risk curve grid differs from the RiskSpec grid")
    if disparity_per_lambda is None:
        disparity = curve.disparity if curve.disparity is not None else np.full(len(lambdas), np.nan)
    else:
        disparity = np.array([disparity_per_lambda[lam] for lam in lambdas.tolist()])
    n = int(curve.n)
    const = _resolve_const(spec, curve) if spec.bound == "dkwm" else None
    if spec.bound == "hb":
        stat = [hb_p_value(float(np.clip(r, 0.0, 1.0)), n, spec.alpha) for r in curve.r_tilde]
        passes = [s < spec.delta for s in stat]
    else:
        stat = [dkwm_ucb(float(r), n, spec.delta, const) for r in curve.r_tilde]
        passes = [s < spec.alpha for s in stat]
    certified_idx = []
    for i in range(len(lambdas) - 1, -1, -1):
        if not passes[i]:
            break
        certified_idx.append(i)
    certified_idx.reverse()
    diagnostics = []
    for i, lam in enumerate(lambdas.tolist()):
        row = {
            "lambda": lam,
            "r_hat": float(curve.r_hat[i]),
            "r_tilde": float(curve.r_tilde[i]),
            "p_or_ucb": float(stat[i]),
            "disparity": float(disparity[i]) if np.isfinite(disparity[i]) else None,
            "certified": i in certified_idx,
        }
        if spec.bound == "dkwm":
            row["dkwm_pvalue_criterion"] = dkwm_pvalue_criterion(
                float(curve.r_hat[i]), n, spec.delta, const, spec.alpha)
        diagnostics.append(row)
    certified = [float(lambdas[i]) for i in certified_idx]
    return CalibrationResult(
        lambda_hat=certified[0] if certified else None,
        certified=certified,
        alpha=spec.alpha,
        delta=spec.delta,
        bound=spec.bound,
        n=n,
        diagnostics=diagnostics,
        dkwm_const=const,
    )


def abstention_fallback():
    """Threshold that makes the thresholded model deterministic (RC scores are <= 1)."""
    return FALLBACK_LAMBDA
