"""scikit-learn style wrappers around the thresholded PL ranker.

``X`` is always a :class:`~fairrank.dataset.QueryCollection` (or a list of
``ScoredQuery``); relevance grades travel inside the queries, so ``y`` is
accepted for API compatibility and ignored.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError
from .dataset import QueryCollection, ScoredQuery
from .metrics import deterministic_evaluation, evaluate
from .plmodel import TplConfig, fit_normalization, rc_table, sample_positions
from .riskcontrol import RiskSpec, build_risk_curve, select_threshold


def check_collection(X):
    """Coerce ``X`` into a non-empty QueryCollection."""
    if isinstance(X, QueryCollection):
        coll = X
    elif isinstance(X, ScoredQuery):
        coll = QueryCollection([X])
    else:
        try:
            items = list(X)
        except TypeError:
            raise ValidationError(f"expected a QueryCollection, got {type(X).__name__}") from None
        if not all(isinstance(q, ScoredQuery) for q in items):
            raise ValidationError("collection items must be ScoredQuery instances")
        coll = QueryCollection(items)
    if len(coll) == 0:
        raise ValidationError("empty query collection")
    return coll


def resolve_seed(random_state):
    """Integer seed from ``None`` (fresh entropy), an int, or a numpy Generator."""
    if random_state is None:
        return int(np.random.SeedSequence().entropy % 2**63)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**63))
    return int(random_state)


class RcScoreTransformer(TransformerMixin, BaseEstimator):
    """Normalize raw scores on a reference set and map each query to RC scores."""

    def __init__(self, tau=1.0, on_degenerate="uniform"):
        self.tau = tau
        self.on_degenerate = on_degenerate

    def fit(self, X, y=None):
        X = check_collection(X)
        self.stats_ = fit_normalization(X)
        self.p_max_ = rc_table(X, self.stats_, self.tau, on_degenerate=self.on_degenerate).p_max_global
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return rc_table(check_collection(X), self.stats_, self.tau, self.p_max_, self.on_degenerate)


class ThresholdedPLRanker(BaseEstimator):
    """Stochastic ranker sampling from the thresholded PL model at fixed thresholds.

    ``lambdas=0`` gives the PL model, ``lambdas=1`` the deterministic ranker.
    """

    def __init__(self, k=5, tau=1.0, lambdas=0.0, mc_samples=100, relevance="grade",
                 random_state=None):
        self.k = k
        self.tau = tau
        self.lambdas = lambdas
        self.mc_samples = mc_samples
        self.relevance = relevance
        self.random_state = random_state

    def _config(self, lambdas=None):
        return TplConfig(k=self.k, tau=self.tau,
                         lambdas=self.lambdas if lambdas is None else lambdas,
                         m=self.mc_samples)

    def fit(self, X, y=None):
        """Fit score normalization on the reference collection ``X``."""
        self.config_ = self._config()
        self.scorer_ = RcScoreTransformer(self.tau).fit(X)
        return self

    def _check_fitted(self):
        if not hasattr(self, "scorer_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def transform(self, X):
        self._check_fitted()
        return self.scorer_.transform(X)

    def sample(self, X, n_samples=1):
        """``{qid: [ranking, ...]}`` with ``n_samples`` independent draws per query."""
        self._check_fitted()
        X = check_collection(X)
        table = self.transform(X)
        rng = np.random.default_rng(resolve_seed(self.random_state))
        cfg = self.config_
        out = {}
        for q in X:
            row = table[q.qid]
            length = min(cfg.k, len(row))
            idx = sample_positions(row, cfg, rng.random((n_samples, length)))
            out[q.qid] = [tuple(row.doc_ids[i] for i in r) for r in idx]
        return out

    def predict(self, X):
        """One sampled ranking per query."""
        return {qid: r[0] for qid, r in self.sample(X, 1).items()}

    def predict_deterministic(self, X):
        self._check_fitted()
        table = self.transform(X)
        return {qid: row.deterministic_ranking(self.k) for qid, row in table.rows.items()}

    def evaluate(self, X, seed=None, exact=None):
        self._check_fitted()
        X = check_collection(X)
        seed = resolve_seed(self.random_state if seed is None else seed)
        return evaluate(X, self.transform(X), self.config_, seed, exact, self.relevance)

    def score(self, X, y=None):
        """Mean NDCG@K under the model."""
        return self.evaluate(X).mean_ndcg


class RiskControlledTPL(ThresholdedPLRanker):
    """Thresholded PL ranker whose shared threshold is calibrated for risk control.

    ``fit`` selects the smallest grid threshold whose risk ``1 - NDCG@K`` is
    certified below ``alpha`` with confidence ``1 - delta`` on the calibration
    queries. If nothing is certified the model abstains and ranks
    deterministically (``lambda_ = 1``).
    """

    def __init__(self, alpha=0.1, delta=0.1, bound="hb", k=5, tau=1.0, mc_samples=100,
                 grid_points=101, grid_mode="uniform", dkwm_const=1.0, relevance="grade",
                 random_state=None):
        self.alpha = alpha
        self.delta = delta
        self.bound = bound
        self.grid_points = grid_points
        self.grid_mode = grid_mode
        self.dkwm_const = dkwm_const
        super().__init__(k=k, tau=tau, lambdas=0.0, mc_samples=mc_samples,
                         relevance=relevance, random_state=random_state)

    def risk_spec(self):
        return RiskSpec(alpha=self.alpha, delta=self.delta, bound=self.bound,
                        grid_mode=self.grid_mode, grid_points=self.grid_points,
                        dkwm_const=self.dkwm_const)

    def fit(self, X, y=None, reference=None):
        """Calibrate on ``X``; normalization is fit on ``reference`` (default ``X``)."""
        X = check_collection(X)
        spec = self.risk_spec()
        self.scorer_ = RcScoreTransformer(self.tau).fit(X if reference is None else reference)
        table = self.scorer_.transform(X)
        base = self._config(0.0)
        self.curve_ = build_risk_curve(X, table, base, spec, seed=resolve_seed(self.random_state))
        self.result_ = select_threshold(self.curve_, spec)
        self.lambda_ = self.result_.effective_lambda
        self.abstained_ = self.result_.abstained
        self.config_ = base.with_lambdas(self.lambda_)
        return self

    def deterministic_evaluation(self, X):
        self._check_fitted()
        X = check_collection(X)
        return deterministic_evaluation(X, self.transform(X), self.config_, self.relevance)
