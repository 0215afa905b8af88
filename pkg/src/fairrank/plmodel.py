"""Score normalization, RC scores and the deterministic / PL / thresholded-PL rankers.

All per-query quantities are kept in the query's original document order;
``RcRow.order`` gives the canonical ranking order (normalized score
descending, ties by ``doc_id`` ascending), which is also the order in which
the thresholded prediction sets grow.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import (
    ValidationError,
    check_lambdas,
    check_positive,
    check_positive_int,
    check_theta,
)

logger = logging.getLogger(__name__)

MAX_EXACT_DOCS = 8


class DegenerateScoresError(ValueError):
    """Raised when normalization statistics have zero spread."""


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    @property
    def degenerate(self):
        return not self.std > 0.0


def fit_normalization(reference):
    """Pooled mean and population std of every raw score in ``reference``."""
    scores = [d.raw_score for q in reference for d in q.docs]
    if not scores:
        raise ValidationError("cannot fit normalization on an empty collection")
    scores = np.asarray(scores, dtype=float)
    stats = NormalizationStats(float(scores.mean()), float(scores.std()))
    if stats.degenerate:
        logger.warning("all reference scores are identical; normalization is degenerate")
    return stats


def default_theta(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


@dataclass(frozen=True)
class TplConfig:
    """Cutoff, temperature, threshold(s), MC sample count and position weights."""

    k: int = 5
    tau: float = 1.0
    lambdas: object = 0.0
    m: int = 100
    theta: tuple = None

    def __post_init__(self):
        k = check_positive_int(self.k, "K")
        check_positive(self.tau, "tau")
        check_positive_int(self.m, "m")
        object.__setattr__(self, "lambdas", check_lambdas(self.lambdas, k))
        theta = default_theta(k) if self.theta is None else self.theta
        object.__setattr__(self, "theta", tuple(check_theta(theta, k)))

    @property
    def shared(self):
        return isinstance(self.lambdas, float)

    def lambda_at(self, position):
        """Threshold for 0-based ``position``."""
        return self.lambdas if self.shared else self.lambdas[position]

    def with_lambdas(self, lambdas):
        return replace(self, lambdas=lambdas)


@dataclass(frozen=True, eq=False)
class RcRow:
    """One query's normalized scores and RC scores (first-position PL probabilities)."""

    qid: str
    doc_ids: tuple
    normalized: np.ndarray
    log_rc: np.ndarray
    tau: float
    order: np.ndarray = field(init=False)

    def __post_init__(self):
        keys = sorted(range(len(self.doc_ids)),
                      key=lambda i: (-self.normalized[i], self.doc_ids[i]))
        object.__setattr__(self, "order", np.asarray(keys, dtype=int))

    def __len__(self):
        return len(self.doc_ids)

    @property
    def rc(self):
        return np.exp(self.log_rc)

    @property
    def max_rc(self):
        return float(np.exp(self.log_rc.max()))

    def level(self, lam):
        """Size of {d : rc_d >= lam}, which is a prefix of ``order``."""
        return int(np.count_nonzero(self.rc >= lam))

    def deterministic_ranking(self, k):
        return tuple(self.doc_ids[i] for i in self.order[: min(k, len(self))])

    def to_dict(self):
        return {
            "qid": self.qid,
            "doc_ids": list(self.doc_ids),
            "normalized": self.normalized.tolist(),
            "rc_scores": self.rc.tolist(),
        }


def rc_scores(query, stats, tau=1.0, on_degenerate="raise"):
    """RC scores of one query: softmax over ``(raw - mean) / std`` at temperature ``tau``.

    With degenerate statistics this raises unless ``on_degenerate="uniform"``,
    in which case every normalized score is 0 and the softmax is uniform.
    """
    check_positive(tau, "tau")
    raw = query.scores
    if stats.degenerate:
        if on_degenerate != "uniform":
            raise DegenerateScoresError(
                "normalization std is 0 (constant scorer); refit on a non-constant "
                "reference or pass on_degenerate='uniform' for the uniform fallback"
            )
        s = np.zeros_like(raw)
    else:
        s = (raw - stats.mean) / stats.std
    z = s / tau
    top = z.max()
    log_rc = z - (top + np.log(np.sum(np.exp(z - top))))
    return RcRow(query.qid, tuple(query.doc_ids), s, log_rc, float(tau))


@dataclass(frozen=True)
class RcScoreTable:
    rows: dict
    p_max_global: float

    def __getitem__(self, qid):
        return self.rows[qid]

    def __len__(self):
        return len(self.rows)

    def to_json(self):
        return json.dumps({
            "p_max_global": self.p_max_global,
            "rows": [r.to_dict() for r in self.rows.values()],
        })


def rc_table(collection, stats, tau=1.0, p_max_global=None, on_degenerate="raise"):
    """RC rows for every query.

    ``p_max_global`` defaults to the maximum RC score seen in ``collection``;
    pass the calibration-set value when scoring a test collection.
    """
    rows = {q.qid: rc_scores(q, stats, tau, on_degenerate) for q in collection}
    if p_max_global is None:
        p_max_global = max((r.max_rc for r in rows.values()), default=0.0)
    return RcScoreTable(rows, float(p_max_global))


def _remaining_mask(row, prefix):
    taken = set(prefix)
    unknown = taken - set(row.doc_ids)
    if unknown:
        raise ValidationError(f"prefix contains doc_ids not in query {row.qid!r}: {sorted(unknown)}")
    return np.array([d not in taken for d in row.doc_ids])


def _candidate_indices(row, available, lam):
    """Canonical-order indices in the thresholded set, with the argmax clamp."""
    ordered = row.order[available[row.order]]
    if ordered.size == 0:
        raise ValidationError("prefix exhausts all documents of the query")
    rc = row.rc
    keep = ordered[rc[ordered] >= lam]
    return keep if keep.size else ordered[:1]


def prediction_set(row, prefix, lambda_k):
    """Documents not in ``prefix`` whose RC score is at least ``lambda_k``.

    An empty set is clamped to the single best remaining document.
    """
    available = _remaining_mask(row, prefix)
    return {row.doc_ids[i] for i in _candidate_indices(row, available, lambda_k)}


def sample_positions(row, config, uniforms):
    """Sequential thresholded-PL draws driven by ``uniforms`` of shape (m, L).

    Returns an (m, L) array of document indices (original order), where
    ``L = min(K, n)``. Row ``j`` depends only on ``uniforms[j]``.
    """
    n = len(row)
    length = min(config.k, n)
    uniforms = np.atleast_2d(uniforms)
    m = uniforms.shape[0]
    if uniforms.shape[1] < length:
        raise ValidationError(f"need {length} uniforms per sample, got {uniforms.shape[1]}")
    rc = row.rc
    logw = row.normalized / config.tau
    # canonical order makes the clamp "first available column"
    canon_logw = logw[row.order]
    canon_rc = rc[row.order]
    available = np.ones((m, n), dtype=bool)
    out = np.empty((m, length), dtype=int)
    rows_idx = np.arange(m)
    for k in range(length):
        lam = config.lambda_at(k)
        cand = available & (canon_rc >= lam)
        empty = ~cand.any(axis=1)
        if empty.any():
            first = np.argmax(available[empty], axis=1)
            cand[empty] = False
            cand[np.flatnonzero(empty), first] = True
        w = np.where(cand, canon_logw, -np.inf)
        w = np.exp(w - w.max(axis=1, keepdims=True))
        cum = np.cumsum(w, axis=1)
        target = uniforms[:, k] * cum[:, -1]
        pick = (cum <= target[:, None]).sum(axis=1)
        # guard u * total landing exactly on the last cumulative value
        pick = np.minimum(pick, n - 1)
        bad = ~cand[rows_idx, pick]
        if bad.any():
            pick[bad] = n - 1 - np.argmax(cand[bad][:, ::-1], axis=1)
        available[rows_idx, pick] = False
        out[:, k] = row.order[pick]
    return out


def sample_ranking(row, config, rng):
    """Draw one ranking (tuple of doc_ids) from the thresholded PL model."""
    length = min(config.k, len(row))
    idx = sample_positions(row, config, rng.random((1, length)))[0]
    return tuple(row.doc_ids[i] for i in idx)


def _check_exact_size(row, config):
    if len(row) > MAX_EXACT_DOCS:
        raise ValidationError(
            f"exact enumeration limited to n <= {MAX_EXACT_DOCS} documents, "
            f"query {row.qid!r} has {len(row)}"
        )


def exact_ranking_distribution(row, config):
    """Enumerate every top-min(K, n) ranking with non-zero probability."""
    _check_exact_size(row, config)
    length = min(config.k, len(row))
    logw = row.normalized / config.tau
    dist = {}

    def recurse(prefix_idx, available, prob):
        k = len(prefix_idx)
        if k == length:
            key = tuple(row.doc_ids[i] for i in prefix_idx)
            dist[key] = dist.get(key, 0.0) + prob
            return
        cand = _candidate_indices(row, available, config.lambda_at(k))
        w = np.exp(logw[cand] - logw[cand].max())
        w /= w.sum()
        for i, p in zip(cand, w):
            if p == 0.0:
                continue
            available[i] = False
            recurse(prefix_idx + [i], available, prob * p)
            available[i] = True

    recurse([], np.ones(len(row), dtype=bool), 1.0)
    return dist


def two_phase_distribution(row, lam, config):
    """Shared-threshold TPL built as PL on the thresholded set, then score order.

    This is a second construction of the same distribution used to validate
    the position-by-position definition.
    """
    _check_exact_size(row, config)
    length = min(config.k, len(row))
    top = row.order[: max(row.level(lam), 1)]
    head_len = min(length, len(top))
    weights = np.exp(row.normalized[top] / config.tau - (row.normalized[top] / config.tau).max())
    dist = {}
    for perm in itertools.permutations(range(len(top)), head_len):
        p, left = 1.0, np.ones(len(top), dtype=bool)
        for j in perm:
            # re-sum instead of subtracting: tiny leftover weights would cancel
            p *= weights[j] / weights[left].sum()
            left[j] = False
        head = [top[j] for j in perm]
        tail = [i for i in row.order if i not in set(head)][: length - head_len]
        key = tuple(row.doc_ids[i] for i in head + tail)
        dist[key] = dist.get(key, 0.0) + p
    return dist


def total_variation(p, q):
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def shared_lambda_equivalence_check(row, lam, config, atol=1e-9):
    """True if enumeration and the two-phase construction agree within ``atol`` TV."""
    cfg = config.with_lambdas(float(lam))
    tv = total_variation(exact_ranking_distribution(row, cfg), two_phase_distribution(row, lam, cfg))
    return tv <= atol
