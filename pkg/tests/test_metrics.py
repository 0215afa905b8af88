import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import (IDENTITY, brute_ndcg, make_query, pairwise_disparity, random_query,
                      row_for, sorted_ranking)
from fairrank._validation import ValidationError
from fairrank.dataset import QueryCollection
from fairrank.metrics import (
    METRICS_CSV_HEADER,
    aggregate_fairness,
    deterministic_evaluation,
    disparity_from_arrays,
    evaluate,
    exact_risk,
    expected_exposure,
    level_statistics,
    mc_query_stats,
    mc_risk,
    metrics_json,
    ndcg_at_k,
    sq_disparity,
    write_metrics_csv,
)
from fairrank.plmodel import TplConfig, rc_table


def table_for(coll, tau=1.0):
    return rc_table(coll, IDENTITY, tau)


# -------------------------------------------------------------------- ndcg

def test_ndcg_ideal_order():
    q = make_query([0, 0, 0], [3, 1, 0])
    assert ndcg_at_k(["d0", "d1", "d2"], q, 3) == pytest.approx(1.0)


def test_ndcg_hand_example():
    q = make_query([0, 0], [0, 3])
    assert ndcg_at_k(["d0", "d1"], q, 2) == pytest.approx(1 / math.log2(3))


def test_ndcg_equal_grades_any_order():
    q = make_query([0, 0, 0], [2, 2, 2])
    assert ndcg_at_k(["d2", "d0", "d1"], q, 5) == pytest.approx(1.0)


def test_ndcg_matches_brute(rng):
    for _ in range(50):
        q = random_query(rng, int(rng.integers(1, 9)))
        perm = rng.permutation(len(q))
        k = int(rng.integers(1, 10))
        ranking = [q.doc_ids[i] for i in perm]
        assert ndcg_at_k(ranking, q, k) == pytest.approx(
            brute_ndcg([int(q.relevances[i]) for i in perm], k), abs=1e-12)


def test_ndcg_zero_idcg_raises():
    with pytest.raises(ValidationError, match="IDCG"):
        ndcg_at_k(["d0"], make_query([0.0], [0]), 1)


# ---------------------------------------------------------------- exposure

def test_exposure_equal_pair():
    q = make_query([0.0, 0.0])
    table = expected_exposure(q, row_for(q), TplConfig(k=2))
    expected = (1 + 1 / math.log2(3)) / 2
    assert table.exposure["q"] == pytest.approx({"d0": expected, "d1": expected})
    assert expected == pytest.approx(0.8155, abs=1e-4)


def test_exposure_deterministic_positions():
    q = make_query([3.0, 1.0, 2.0])
    e = expected_exposure(q, row_for(q), TplConfig(k=3, lambdas=1.0)).exposure["q"]
    assert e == pytest.approx({"d0": 1.0, "d2": 1 / math.log2(3), "d1": 0.5})


def test_exposure_conservation(rng):
    for _ in range(20):
        n = int(rng.integers(1, 7))
        k = int(rng.integers(1, 6))
        q = random_query(rng, n)
        cfg = TplConfig(k=k, lambdas=float(rng.uniform(0, 0.6)))
        e = expected_exposure(q, row_for(q), cfg).exposure["q"]
        assert sum(e.values()) == pytest.approx(sum(cfg.theta[: min(k, n)]), abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.2, (0.0, 0.5, 0.2)])
def test_exposure_mc_matches_exact(lam):
    q = make_query([0.4, -0.2, 1.3, 0.0, -1.0], [2, 0, 1, 3, 0])
    row = row_for(q)
    cfg = TplConfig(k=3, lambdas=lam, m=50_000)
    exact = expected_exposure(q, row, cfg).exposure["q"]
    mc = expected_exposure(q, row, cfg, mode="mc", seed=3)
    for d in q.doc_ids:
        se = mc.std_error["q"][d]
        assert abs(mc.exposure["q"][d] - exact[d]) <= 4 * se + 1e-12


def test_exposure_unknown_mode():
    q = make_query([0.0, 1.0])
    with pytest.raises(ValidationError):
        expected_exposure(q, row_for(q), TplConfig(), mode="bogus")


# --------------------------------------------------------------- disparity

def test_disparity_proportional_is_zero():
    q = make_query([0, 0, 0], [1, 2, 3])
    assert sq_disparity(q, {"d0": 0.5, "d1": 1.0, "d2": 1.5}) == pytest.approx(0.0, abs=1e-12)


def test_disparity_two_doc_hand_example():
    q = make_query([0, 0], [1, 1])
    assert sq_disparity(q, {"d0": 1.0, "d1": 0.0}) == pytest.approx(1.0)
    assert sq_disparity(q, {"d0": 1.0, "d1": 0.0}, normalize=False) == pytest.approx(2.0)


def test_disparity_single_doc_zero():
    assert sq_disparity(make_query([0.0], [2]), {"d0": 1.0}) == 0.0


finite = st.floats(0, 10, allow_nan=False)


@given(st.lists(st.tuples(finite, st.integers(0, 4)), min_size=1, max_size=8))
def test_disparity_matches_pairwise_oracle(pairs):
    e = [p[0] for p in pairs]
    rho = [float(p[1]) for p in pairs]
    for normalize in (True, False):
        got = float(disparity_from_arrays(np.array(e), np.array(rho), normalize))
        want = pairwise_disparity(e, rho, normalize)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9 * (1 + max(e) ** 2 * 16))


@given(st.lists(finite, min_size=2, max_size=6), st.floats(0.1, 5))
def test_disparity_scales_quadratically(e, c):
    rho = np.arange(len(e), dtype=float)
    base = disparity_from_arrays(np.array(e), rho)
    assert disparity_from_arrays(c * np.array(e), rho) == pytest.approx(c * c * base, rel=1e-9,
                                                                        abs=1e-9)


def test_disparity_gain_weighting():
    q = make_query([0, 0], [1, 2])
    e = {"d0": 1.0, "d1": 1.0}
    assert sq_disparity(q, e, relevance="gain") == pytest.approx(pairwise_disparity([1, 1], [1, 3]))
    with pytest.raises(ValidationError):
        sq_disparity(q, e, relevance="bogus")


def test_aggregate_fairness_examples():
    assert aggregate_fairness({"a": 0.3}).mean_disparity == pytest.approx(0.3)
    assert aggregate_fairness({"a": 0.0, "b": 0.0}).mean_disparity == 0.0
    assert aggregate_fairness({"a": 0.0, "b": 1.0}).mean_disparity == pytest.approx(0.5)


# -------------------------------------------------------------------- risk

def test_mc_risk_deterministic_zero_variance(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, lambdas=1.0, m=50)
    est = mc_risk(small_collection, table, cfg, seed=1)
    det = deterministic_evaluation(small_collection, table, cfg)
    for q in small_collection:
        assert est.per_query_risk[q.qid] == pytest.approx(det.per_query[q.qid]["risk"], abs=1e-12)
        assert est.per_query_se[q.qid] == 0.0


def test_mc_risk_half_example():
    coll = QueryCollection([make_query([0.0, 0.0], [1, 0])])
    est = mc_risk(coll, table_for(coll), TplConfig(k=1, m=20_000), seed=5)
    assert abs(est.mean_risk - 0.5) <= 0.015
    assert exact_risk(coll, table_for(coll), TplConfig(k=1)).mean_risk == pytest.approx(0.5)


def test_exact_risk_deterministic_matches_ndcg(rng):
    q = random_query(rng, 6)
    coll = QueryCollection([q])
    risk = exact_risk(coll, table_for(coll), TplConfig(k=4, lambdas=1.0)).mean_risk
    assert risk == pytest.approx(1 - ndcg_at_k(sorted_ranking(q, 4), q, 4), abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.15, (0.3, 0.0, 0.1)])
def test_mc_risk_matches_exact(lam):
    q = make_query([0.4, -0.2, 1.3, 0.0, -1.0], [2, 0, 1, 3, 0])
    coll = QueryCollection([q])
    table = table_for(coll)
    cfg = TplConfig(k=3, lambdas=lam, m=20_000)
    est = mc_risk(coll, table, cfg, seed=11)
    exact = exact_risk(coll, table, cfg).mean_risk
    assert abs(est.mean_risk - exact) <= 3 * est.std_error


def test_mc_is_deterministic_given_seed(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, lambdas=0.1, m=64)
    a = mc_risk(small_collection, table, cfg, seed=9).per_query_risk
    b = mc_risk(small_collection, table, cfg, seed=9).per_query_risk
    c = mc_risk(small_collection, table, cfg, seed=10).per_query_risk
    assert a == b and a != c


def test_mc_per_query_stream_independent_of_collection(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, lambdas=0.0, m=64)
    whole = mc_query_stats(small_collection, table, cfg, seed=4)
    sub = small_collection.subset([small_collection.qids[3]])
    part = mc_query_stats(sub, table, cfg, seed=4)
    qid = sub.qids[0]
    assert part[qid].loss_mean == whole[qid].loss_mean


def test_mismatched_row_rejected():
    coll = QueryCollection([make_query([0.0, 1.0])])
    other = QueryCollection([make_query([0.0, 1.0, 2.0])])
    with pytest.raises(ValidationError, match="does not match"):
        exact_risk(coll, table_for(other), TplConfig())


# ------------------------------------------------------- level statistics

def test_level_statistics_exact_consistent(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3)
    levels = level_statistics(small_collection, table, cfg, exact=True)
    for q, ls in zip(small_collection, levels):
        for j in range(1, len(q) + 1):
            lam = float(ls.rc_sorted[j - 1])
            ev = evaluate(QueryCollection([q]), table, cfg.with_lambdas(lam), exact=True)
            rec = ev.per_query[q.qid]
            assert ls.loss[ls.level(lam) - 1] == pytest.approx(rec["risk"], abs=1e-12)
            assert ls.disparity[ls.level(lam) - 1] == pytest.approx(rec["disparity"], abs=1e-12)


def test_level_statistics_levels_vectorized(small_collection):
    table = table_for(small_collection)
    ls = level_statistics(small_collection, table, TplConfig(k=3), exact=True)[0]
    grid = np.linspace(0, 1, 37)
    assert list(ls.levels(grid)) == [ls.level(g) for g in grid]


def test_level_statistics_mc_close_to_exact(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, m=4000)
    exact = level_statistics(small_collection, table, cfg, exact=True)
    mc = level_statistics(small_collection, table, cfg, seed=2, exact=False)
    for a, b in zip(exact, mc):
        np.testing.assert_allclose(a.loss, b.loss, atol=0.05)
        # level 1 is the score-sorted ranking, identical on both paths
        assert b.loss[0] == pytest.approx(a.loss[0], abs=1e-12)


def test_level_statistics_mc_matches_mc_risk(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, m=200)
    levels = level_statistics(small_collection, table, cfg, seed=6, exact=False)
    for ls in levels[:10]:
        lam = float(ls.rc_sorted[min(2, len(ls.rc_sorted) - 1)])
        q = small_collection[ls.qid]
        est = mc_risk(QueryCollection([q]), table, cfg.with_lambdas(lam), seed=6)
        assert ls.loss[ls.level(lam) - 1] == pytest.approx(est.mean_risk, abs=1e-12)


def test_loss_non_increasing_in_lambda_exact(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3)
    grid = np.linspace(0, 1, 21)
    risks = [exact_risk(small_collection, table, cfg.with_lambdas(float(g))).mean_risk
             for g in grid]
    # pointwise monotonicity is not guaranteed, but the endpoints are ordered
    assert risks[-1] <= risks[0]


# -------------------------------------------------------------- evaluation

def test_evaluate_summary_and_export(tmp_path, small_collection):
    table = table_for(small_collection)
    ev = evaluate(small_collection, table, TplConfig(k=3, lambdas=0.2))
    s = ev.summary()
    assert s["num_queries"] == len(small_collection)
    assert s["mean_ndcg"] == pytest.approx(1 - s["mean_risk"])
    path = tmp_path / "m.csv"
    write_metrics_csv(ev, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_CSV_HEADER
    assert len(rows) == len(small_collection) + 1
    payload = json.loads(metrics_json(ev))
    assert payload["summary"]["mean_ndcg"] == pytest.approx(ev.mean_ndcg)


def test_deterministic_evaluation_equals_lambda_one(small_collection):
    table = table_for(small_collection)
    cfg = TplConfig(k=3, lambdas=1.0)
    det = deterministic_evaluation(small_collection, table, cfg)
    ev = evaluate(small_collection, table, cfg, exact=True)
    assert det.mean_ndcg == pytest.approx(ev.mean_ndcg, abs=1e-12)
    assert det.mean_disparity == pytest.approx(ev.mean_disparity, abs=1e-12)
