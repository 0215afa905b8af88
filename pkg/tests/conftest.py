import itertools
import math

import numpy as np
import pytest

from fairrank.dataset import Document, QueryCollection, ScoredQuery
from fairrank.plmodel import NormalizationStats, rc_scores

IDENTITY = NormalizationStats(0.0, 1.0)


def make_query(scores, rels=None, qid="q", ids=None):
    n = len(scores)
    rels = [1] * n if rels is None else rels
    ids = [f"d{i}" for i in range(n)] if ids is None else ids
    return ScoredQuery(qid, [Document(i, float(s), int(r)) for i, s, r in zip(ids, scores, rels)])


def random_query(rng, n, qid="q"):
    rels = rng.integers(0, 5, size=n)
    if rels.max() == 0:
        rels[rng.integers(n)] = int(rng.integers(1, 5))
    scores = rng.normal(size=n) * 1.5
    return make_query(scores, rels, qid=qid)


def row_for(query, tau=1.0):
    return rc_scores(query, IDENTITY, tau)


def pl_oracle(query, tau, k):
    """Plackett-Luce ranking distribution by the textbook product formula."""
    docs = query.docs
    weights = [math.exp(d.raw_score / tau) for d in docs]
    out = {}
    for perm in itertools.permutations(range(len(docs)), min(k, len(docs))):
        p, left = 1.0, set(range(len(docs)))
        for i in perm:
            # sum the remaining weights afresh; a running subtraction cancels badly
            p *= weights[i] / math.fsum(weights[j] for j in left)
            left.remove(i)
        out[tuple(docs[i].doc_id for i in perm)] = p
    return out


def sorted_ranking(query, k):
    ordered = sorted(query.docs, key=lambda d: (-d.raw_score, d.doc_id))
    return tuple(d.doc_id for d in ordered[:k])


def pairwise_disparity(exposure, rho, normalize=True):
    n = len(rho)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += (exposure[i] * rho[j] - exposure[j] * rho[i]) ** 2
    if not normalize:
        return total
    return total / (n * (n - 1)) if n > 1 else 0.0


def brute_ndcg(grades, k):
    def dcg(g):
        return sum((2 ** x - 1) / math.log2(i + 2) for i, x in enumerate(g[:k]))
    return dcg(grades) / dcg(sorted(grades, reverse=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_collection():
    rng = np.random.default_rng(7)
    return QueryCollection([random_query(rng, int(rng.integers(2, 7)), qid=f"q{i}")
                            for i in range(40)])


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, text in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {text}")
