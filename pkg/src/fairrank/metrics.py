"""NDCG utility, ranking risk, expected exposure and squared disparity.

Monte Carlo estimates use common random numbers: the noise for a query is
a deterministic function of ``(seed, qid)`` and is reused for every
threshold. With a shared threshold the sampler perturbs ``s_d / tau`` with
per-document Gumbel noise once per sample; the thresholded set is a prefix
of the score-sorted documents, so one perturbed sort serves every
threshold level. Per-position thresholds fall back to the sequential
sampler in :mod:`fairrank.plmodel`.
"""

import csv
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError
from .plmodel import MAX_EXACT_DOCS, exact_ranking_distribution, sample_positions

CHUNK_CELLS = 2_000_000
# automatic choice of the exact path: enumerate only small ranking spaces
EXACT_AUTO_RANKINGS = 1000


def discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def dcg(rels, k):
    rels = np.asarray(rels, dtype=float)[:k]
    return float(np.sum((2.0 ** rels - 1.0) * discounts(len(rels))))


def idcg(rels, k):
    return dcg(np.sort(np.asarray(rels))[::-1], k)


def ndcg_at_k(ranking, query, k):
    """NDCG@k of a ranking given as a sequence of doc_ids of ``query``."""
    grade = {d.doc_id: d.relevance for d in query.docs}
    ideal = idcg(list(grade.values()), k)
    if ideal <= 0.0:
        raise ValidationError(f"query {query.qid!r} has no relevant documents (IDCG = 0)")
    return dcg([grade[d] for d in ranking], k) / ideal


@dataclass
class UtilityResult:
    per_query_ndcg: dict
    mean_ndcg: float
    k: int


@dataclass
class RiskEstimate:
    per_query_risk: dict
    mean_risk: float
    m: int
    estimator: str
    per_query_se: dict = field(default_factory=dict)

    @property
    def std_error(self):
        if not self.per_query_se:
            return 0.0
        se = np.array(list(self.per_query_se.values()))
        return float(np.sqrt(np.sum(se ** 2)) / len(se))


@dataclass
class ExposureTable:
    """``exposure[qid][doc_id]``; ``std_error`` is filled for Monte Carlo estimates."""

    exposure: dict
    std_error: dict = field(default_factory=dict)
    estimator: str = "exact"


@dataclass
class DisparityResult:
    per_query_disparity: dict
    mean_disparity: float
    normalization: str = "pairs"


def query_rng(seed, qid, stream=0):
    key = zlib.crc32(str(qid).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, key)))


def _relevance_weights(rels, relevance):
    rels = np.asarray(rels, dtype=float)
    if relevance == "grade":
        return rels
    if relevance == "gain":
        return 2.0 ** rels - 1.0
    raise ValidationError(f"unknown relevance weighting {relevance!r}")


def disparity_from_arrays(exposure, rho, normalize=True):
    """Vectorized pairwise squared disparity over the last axis.

    Uses sum_{d != d'} (E_d rho_d' - E_d' rho_d)^2
    = 2 (sum E^2 sum rho^2 - (sum E rho)^2).
    """
    exposure = np.asarray(exposure, dtype=float)
    rho = np.asarray(rho, dtype=float)
    raw = 2.0 * (np.sum(exposure ** 2, -1) * np.sum(rho ** 2, -1)
                 - np.sum(exposure * rho, -1) ** 2)
    raw = np.maximum(raw, 0.0)
    if not normalize:
        return raw
    n = exposure.shape[-1]
    return raw / (n * (n - 1)) if n > 1 else np.zeros_like(raw)


def sq_disparity(query, exposures, relevance="grade", normalize=True):
    """Mean over ordered document pairs of ``(E_d rho_d' - E_d' rho_d)^2``.

    ``exposures`` maps doc_id to expected exposure. With ``normalize=False``
    the unnormalized pair sum is returned instead.
    """
    if len(query.docs) < 2:
        return 0.0
    e = np.array([exposures.get(d.doc_id, 0.0) for d in query.docs])
    rho = _relevance_weights(query.relevances, relevance)
    return float(disparity_from_arrays(e, rho, normalize))


def aggregate_fairness(per_query_disparity, normalization="pairs"):
    values = list(per_query_disparity.values())
    mean = float(np.mean(values)) if values else 0.0
    return DisparityResult(dict(per_query_disparity), mean, normalization)


def _auto_exact(pairs, k):
    return all(len(r) <= MAX_EXACT_DOCS and math.perm(len(r), min(k, len(r))) <= EXACT_AUTO_RANKINGS
               for _, r in pairs)


def _query_rows(queries, table):
    for q in queries:
        row = table[q.qid]
        if tuple(row.doc_ids) != tuple(q.doc_ids):
            raise ValidationError(f"RC row for {q.qid!r} does not match the query's documents")
        yield q, row


# ---------------------------------------------------------------- exact path


def _exact_query(query, row, config):
    """(risk, {doc_id: exposure}) by enumeration."""
    dist = exact_ranking_distribution(row, config)
    k = config.k
    theta = np.asarray(config.theta)
    ideal = idcg(query.relevances, k)
    if ideal <= 0.0:
        raise ValidationError(f"query {query.qid!r} has no relevant documents (IDCG = 0)")
    grade = {d.doc_id: d.relevance for d in query.docs}
    risk = 0.0
    exposure = {d: 0.0 for d in row.doc_ids}
    for ranking, p in dist.items():
        risk += p * (1.0 - dcg([grade[d] for d in ranking], k) / ideal)
        for pos, d in enumerate(ranking):
            exposure[d] += p * theta[pos]
    return risk, exposure


def exact_risk(queries, table, config):
    per_query = {q.qid: _exact_query(q, row, config)[0] for q, row in _query_rows(queries, table)}
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return RiskEstimate(per_query, mean, 0, "exact")


# ----------------------------------------------------------- batched MC path


class _Batch:
    """Padded canonical-order arrays for a list of (query, row) pairs."""

    def __init__(self, pairs, config):
        self.pairs = pairs
        self.k = config.k
        self.tau = config.tau
        self.n = np.array([len(r) for _, r in pairs])
        q_count, width = len(pairs), int(self.n.max())
        self.width = width
        self.logw = np.full((q_count, width), -np.inf)
        self.gains = np.zeros((q_count, width))
        self.rc = np.full((q_count, width), -1.0)
        self.idcg = np.empty(q_count)
        for i, (q, r) in enumerate(pairs):
            n = len(r)
            rels = q.relevances[r.order]
            self.logw[i, :n] = r.normalized[r.order] / config.tau
            self.gains[i, :n] = 2.0 ** rels - 1.0
            self.rc[i, :n] = r.rc[r.order]
            self.idcg[i] = idcg(rels, config.k)
        if np.any(self.idcg <= 0):
            bad = [pairs[i][0].qid for i in np.flatnonzero(self.idcg <= 0)]
            raise ValidationError(f"queries without relevant documents: {bad[:5]}")
        pad = max(width, config.k) + 1
        self.disc = np.zeros(pad)
        self.disc[: config.k] = discounts(config.k)
        self.theta = np.zeros(pad)
        self.theta[: config.k] = config.theta

    def levels(self, lam):
        lam = np.broadcast_to(np.asarray(lam, dtype=float), self.n.shape)
        return np.maximum(np.sum(self.rc >= lam[:, None], axis=1), 1)

    def perturbed_order(self, seed, m):
        """Per-sample document order by perturbed score, plus cached gathers."""
        keys = np.full((len(self.pairs), m, self.width), -np.inf)
        for i, (q, _) in enumerate(self.pairs):
            n = self.n[i]
            g = query_rng(seed, q.qid).gumbel(size=(m, n))
            keys[i, :, :n] = self.logw[i, :n] + g
        order = np.argsort(-keys, axis=2, kind="stable")
        gains = np.take_along_axis(np.broadcast_to(self.gains[:, None, :], order.shape), order, 2)
        return order, np.argsort(order, axis=2), gains

    def level_stats(self, perturbed, jq):
        """Per-sample loss (Q, m) and per-sample exposure (Q, m, width) at levels ``jq``."""
        order, inverse, g_ord = perturbed
        q_count, m, width = order.shape
        k = self.k
        in_set = order < jq[:, None, None]
        rank = np.cumsum(in_set, axis=2)
        sel = in_set & (rank <= k)
        pos = np.where(sel, rank - 1, len(self.disc) - 1)
        head = np.sum(g_ord * self.disc[pos], axis=2)
        exposure = np.take_along_axis(self.theta[pos], inverse, 2)
        # deterministic completion once the thresholded set is used up
        length = np.minimum(k, self.n)
        used = np.minimum(k, jq)
        tail = np.zeros(q_count)
        rows = np.arange(q_count)
        for t in range(k):
            p = used + t
            ok = p < length
            if not ok.any():
                break
            col = np.where(ok, jq + t, 0)
            pp = np.where(ok, p, len(self.disc) - 1)
            tail += np.where(ok, self.gains[rows, col] * self.disc[pp], 0.0)
            exposure[rows[ok], :, col[ok]] += self.theta[pp[ok]][:, None]
        loss = 1.0 - (head + tail[:, None]) / self.idcg[:, None]
        return loss, exposure


def _chunks(pairs, m):
    if not pairs:
        return
    width = max(len(r) for _, r in pairs)
    size = max(1, CHUNK_CELLS // max(1, m * width))
    for start in range(0, len(pairs), size):
        yield pairs[start:start + size]


@dataclass
class QueryMC:
    """Monte Carlo summary for one query; exposure arrays are in original doc order."""

    loss_mean: float
    loss_se: float
    exposure: np.ndarray
    exposure_se: np.ndarray


def _std_error(samples):
    """Standard error of the mean over axis 0; exactly 0 for constant columns."""
    m = samples.shape[0]
    if m < 2:
        return np.zeros(samples.shape[1:]) if samples.ndim > 1 else 0.0
    se = samples.std(axis=0, ddof=1) / np.sqrt(m)
    constant = np.ptp(samples, axis=0) == 0
    return np.where(constant, 0.0, se)


def _uncanon(row, arr):
    out = np.empty(len(row))
    out[row.order] = arr[: len(row)]
    return out


def mc_query_stats(queries, table, config, seed):
    """Per-query MC loss and exposure under ``config`` (``config.m`` samples each)."""
    pairs = list(_query_rows(queries, table))
    m = config.m
    result = {}
    if config.shared:
        for chunk in _chunks(pairs, m):
            batch = _Batch(chunk, config)
            order = batch.perturbed_order(seed, m)
            loss, expo = batch.level_stats(order, batch.levels(config.lambdas))
            for i, (q, row) in enumerate(chunk):
                n = len(row)
                e = expo[i, :, :n]
                result[q.qid] = QueryMC(
                    float(loss[i].mean()),
                    float(_std_error(loss[i])),
                    _uncanon(row, e.mean(axis=0)),
                    _uncanon(row, _std_error(e)),
                )
        return result
    theta = np.asarray(config.theta)
    for q, row in pairs:
        n = len(row)
        length = min(config.k, n)
        u = query_rng(seed, q.qid, stream=1).random((m, length))
        idx = sample_positions(row, config, u)
        rels = q.relevances
        ideal = idcg(rels, config.k)
        loss = 1.0 - np.sum((2.0 ** rels[idx] - 1.0) * discounts(length), axis=1) / ideal
        e = np.zeros((m, n))
        np.put_along_axis(e, idx, np.broadcast_to(theta[:length], idx.shape), axis=1)
        result[q.qid] = QueryMC(
            float(loss.mean()),
            float(_std_error(loss)),
            e.mean(axis=0),
            _std_error(e),
        )
    return result


def mc_risk(queries, table, config, seed):
    """Monte Carlo mean of ``1 - NDCG@K`` with ``config.m`` rankings per query."""
    stats = mc_query_stats(queries, table, config, seed)
    per_query = {qid: s.loss_mean for qid, s in stats.items()}
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return RiskEstimate(per_query, mean, config.m, "monte-carlo",
                        {qid: s.loss_se for qid, s in stats.items()})


def expected_exposure(query, row, config, mode="exact", seed=0):
    """Expected exposure of every document of one query, as an ExposureTable."""
    if mode == "exact":
        _, exposure = _exact_query(query, row, config)
        return ExposureTable({query.qid: exposure}, estimator="exact")
    if mode != "mc":
        raise ValidationError(f"unknown exposure mode {mode!r}")
    s = mc_query_stats([query], {query.qid: row}, config, seed)[query.qid]
    return ExposureTable(
        {query.qid: dict(zip(row.doc_ids, s.exposure.tolist()))},
        {query.qid: dict(zip(row.doc_ids, s.exposure_se.tolist()))},
        estimator="monte-carlo",
    )


# ------------------------------------------------------ per-level statistics


@dataclass
class LevelStats:
    """Statistics of one query at every threshold level.

    Level ``j`` (1-based) means the thresholded set holds the ``j`` best
    documents; ``loss[j-1]`` and ``exposure[j-1]`` (original doc order) are the
    corresponding risk and expected exposure, ``disparity[j-1]`` the
    pair-normalized squared disparity.
    """

    qid: str
    rc_sorted: np.ndarray
    loss: np.ndarray
    exposure: np.ndarray
    disparity: np.ndarray
    disparity_raw: np.ndarray

    def level(self, lam):
        return max(int(np.count_nonzero(self.rc_sorted >= lam)), 1)

    def levels(self, lambdas):
        """Vectorized :meth:`level` for an ascending grid."""
        ascending = self.rc_sorted[::-1]
        counts = len(ascending) - np.searchsorted(ascending, lambdas, side="left")
        return np.maximum(counts, 1)


def level_statistics(queries, table, config, seed=0, exact=None, relevance="grade"):
    """Risk, exposure and disparity of each query at all shared-threshold levels.

    ``exact=None`` enumerates when every query has at most
    ``EXACT_AUTO_RANKINGS`` top-K rankings and
    uses ``config.m`` Monte Carlo samples (common across levels) otherwise.
    """
    pairs = list(_query_rows(queries, table))
    if exact is None:
        exact = _auto_exact(pairs, config.k)
    out = []
    if exact:
        for q, row in pairs:
            n = len(row)
            rc_sorted = row.rc[row.order]
            loss = np.empty(n)
            expo = np.empty((n, n))
            for j in range(1, n + 1):
                r, e = _exact_query(q, row, config.with_lambdas(float(rc_sorted[j - 1])))
                loss[j - 1] = r
                expo[j - 1] = [e[d] for d in row.doc_ids]
            out.append(_finish_levels(q, rc_sorted, loss, expo, relevance))
        return out
    m = config.m
    for chunk in _chunks(pairs, m):
        batch = _Batch(chunk, config)
        order = batch.perturbed_order(seed, m)
        losses = np.empty((len(chunk), batch.width))
        expos = np.empty((len(chunk), batch.width, batch.width))
        for j in range(1, batch.width + 1):
            jq = np.minimum(j, batch.n)
            loss, expo = batch.level_stats(order, jq)
            losses[:, j - 1] = loss.mean(axis=1)
            expos[:, j - 1] = expo.mean(axis=1)
        for i, (q, row) in enumerate(chunk):
            n = len(row)
            expo = np.empty((n, n))
            expo[:, row.order] = expos[i, :n, :n]
            out.append(_finish_levels(q, row.rc[row.order], losses[i, :n], expo, relevance))
    return out


def _finish_levels(query, rc_sorted, loss, expo, relevance):
    rho = _relevance_weights(query.relevances, relevance)
    return LevelStats(
        query.qid, rc_sorted, loss, expo,
        disparity_from_arrays(expo, rho[None, :]),
        disparity_from_arrays(expo, rho[None, :], normalize=False),
    )


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    """Per-query NDCG, risk and disparity of one ranking model on a collection."""

    k: int
    per_query: dict
    estimator: str
    normalization: str = "pairs"

    @property
    def utility(self):
        ndcg = {q: v["ndcg"] for q, v in self.per_query.items()}
        return UtilityResult(ndcg, _mean(ndcg.values()), self.k)

    @property
    def risk(self):
        risk = {q: v["risk"] for q, v in self.per_query.items()}
        return RiskEstimate(risk, _mean(risk.values()), 0, self.estimator)

    @property
    def fairness(self):
        return aggregate_fairness({q: v["disparity"] for q, v in self.per_query.items()},
                                  self.normalization)

    @property
    def mean_ndcg(self):
        return self.utility.mean_ndcg

    @property
    def mean_risk(self):
        return self.risk.mean_risk

    @property
    def mean_disparity(self):
        return self.fairness.mean_disparity

    @property
    def mean_disparity_raw(self):
        return _mean(v["disparity_raw"] for v in self.per_query.values())

    def summary(self):
        return {
            "k": self.k,
            "estimator": self.estimator,
            "num_queries": len(self.per_query),
            "mean_ndcg": self.mean_ndcg,
            "mean_risk": self.mean_risk,
            "mean_disparity": self.mean_disparity,
            "mean_disparity_raw": self.mean_disparity_raw,
            "disparity_normalization": self.normalization,
        }


def _mean(values):
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def evaluate(queries, table, config, seed=0, exact=None, relevance="grade"):
    """NDCG@K, risk and disparity of the TPL model given by ``config``.

    ``exact=None`` picks enumeration or Monte Carlo as in :func:`level_statistics`.
    """
    pairs = list(_query_rows(queries, table))
    if exact is None:
        exact = _auto_exact(pairs, config.k)
    per_query = {}
    if exact:
        for q, row in pairs:
            risk, expo = _exact_query(q, row, config)
            per_query[q.qid] = _record(q, risk, expo, relevance)
        return Evaluation(config.k, per_query, "exact")
    stats = mc_query_stats(queries, table, config, seed)
    for q, row in pairs:
        s = stats[q.qid]
        per_query[q.qid] = _record(q, s.loss_mean, dict(zip(row.doc_ids, s.exposure)), relevance)
    return Evaluation(config.k, per_query, "monte-carlo")


def _record(query, risk, exposure, relevance):
    return {
        "ndcg": 1.0 - risk,
        "risk": risk,
        "disparity": sq_disparity(query, exposure, relevance),
        "disparity_raw": sq_disparity(query, exposure, relevance, normalize=False),
    }


def deterministic_evaluation(queries, table, config, relevance="grade"):
    """Metrics of the score-sorted ranking (no sampling)."""
    theta = np.asarray(config.theta)
    per_query = {}
    for q, row in _query_rows(queries, table):
        ranking = row.deterministic_ranking(config.k)
        ndcg = ndcg_at_k(ranking, q, config.k)
        expo = {d: 0.0 for d in row.doc_ids}
        for pos, d in enumerate(ranking):
            expo[d] = float(theta[pos])
        per_query[q.qid] = _record(q, 1.0 - ndcg, expo, relevance)
    return Evaluation(config.k, per_query, "exact")


METRICS_CSV_HEADER = ["qid", "ndcg", "risk", "disparity", "disparity_raw"]


def write_metrics_csv(evaluation, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for qid, v in evaluation.per_query.items():
            writer.writerow([qid, repr(v["ndcg"]), repr(v["risk"]),
                             repr(v["disparity"]), repr(v["disparity_raw"])])


def metrics_json(evaluation):
    return json.dumps({
        "summary": evaluation.summary(),
        "per_query": [{"qid": q, **v} for q, v in evaluation.per_query.items()],
    }, indent=2)
