import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from fairrank._validation import ValidationError
from fairrank.dataset import Document, QueryCollection, ScoredQuery, SplitSpec
from fairrank.harness import (
    COVERAGE_CSV_HEADER,
    TRADEOFF_CSV_HEADER,
    AlphaMode,
    SynthSpec,
    TradeoffCurve,
    emit_report,
    generate_synthetic,
    run_coverage,
    run_tradeoff_sweep,
)
from fairrank.metrics import deterministic_evaluation, expected_exposure
from fairrank.plmodel import TplConfig, fit_normalization, rc_scores, rc_table
from fairrank.riskcontrol import RiskSpec

SMALL = SynthSpec(num_queries=120, min_docs=3, max_docs=8, seed=5)


@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic(SMALL)


# ---------------------------------------------------------------- synthetic

def test_synthetic_deterministic(small_synth):
    assert generate_synthetic(SMALL).queries == small_synth.queries
    other = generate_synthetic(replace(SMALL, seed=6))
    assert other.queries != small_synth.queries


def test_synthetic_shape(small_synth):
    assert len(small_synth) == 120
    assert all(3 <= len(q) <= 8 for q in small_synth)
    assert all(q.relevances.max() > 0 for q in small_synth)
    assert len(set(small_synth.qids)) == 120


def test_synthetic_noiseless_is_ideal():
    coll = generate_synthetic(SynthSpec(num_queries=50, sigma=0.0, tie_cluster_prob=0.0, seed=1))
    cfg = TplConfig(k=5)
    table = rc_table(coll, fit_normalization(coll))
    det = deterministic_evaluation(coll, table, cfg)
    assert all(v["ndcg"] == pytest.approx(1.0) for v in det.per_query.values())


def test_synthetic_validation():
    with pytest.raises(ValidationError):
        SynthSpec(relevance_probs=(1.0, 0, 0, 0, 0))
    with pytest.raises(ValidationError):
        SynthSpec(min_docs=5, max_docs=3)
    with pytest.raises(ValidationError):
        SynthSpec(cluster_size=1)


def test_tie_cluster_exposure_gap():
    spec = SynthSpec(num_queries=1, min_docs=4, max_docs=4, tie_cluster_prob=1.0,
                     cluster_size=2, seed=3)
    q = generate_synthetic(spec).queries[0]
    s = q.scores
    pairs = [(abs(s[i] - s[j]), i, j) for i in range(4) for j in range(i + 1, 4)]
    gap, i, j = min(pairs)
    assert gap <= 0.02 * spec.sigma and q.relevances[i] == q.relevances[j]
    a, b = q.doc_ids[i], q.doc_ids[j]
    row = rc_scores(q, fit_normalization(QueryCollection([q])))
    det = expected_exposure(q, row, TplConfig(k=4, lambdas=1.0)).exposure["q000000"]
    mc = expected_exposure(q, row, TplConfig(k=4, lambdas=0.0, m=10_000), mode="mc",
                           seed=1).exposure["q000000"]
    det_gap = abs(det[a] - det[b])
    assert det_gap > 0
    assert abs(mc[a] - mc[b]) / det_gap < 0.55


# ----------------------------------------------------------------- coverage

def test_alpha_mode():
    assert AlphaMode.absolute(0.2).resolve(0.7) == 0.2
    assert AlphaMode.relative(0.9).resolve(0.8) == pytest.approx(1 - 0.72)
    assert AlphaMode.relative(1.0).resolve(1.0) > 0
    assert AlphaMode.absolute(1.0).resolve(0.5) < 1.0
    with pytest.raises(ValidationError):
        AlphaMode("fixed", 0.1)


FAST = TplConfig(k=5, m=30)


def test_coverage_vacuous_alpha(small_synth):
    report = run_coverage(small_synth, AlphaMode.absolute(1.0), RiskSpec(grid_points=21),
                          trials=3, split_template=SplitSpec(0.25, seed=1), config=FAST)
    assert report.coverage_rate == 1.0 and report.abstentions == 0
    assert all(r.lambda_hat == 0.0 for r in report.records)


def test_coverage_bad_scorer_abstains(small_synth):
    flipped = QueryCollection([
        ScoredQuery(q.qid, [Document(d.doc_id, -float(d.relevance), d.relevance) for d in q.docs])
        for q in small_synth
    ])
    report = run_coverage(flipped, AlphaMode.absolute(0.05), RiskSpec(grid_points=21), trials=3,
                          split_template=SplitSpec(0.25, seed=1), config=FAST)
    assert report.abstentions == 3 and report.coverage_rate is None and report.all_abstained
    assert all(r.test_ndcg == pytest.approx(r.det_ndcg) for r in report.records)


def test_coverage_trials_are_independent_and_thread_safe(small_synth):
    kwargs = dict(spec=RiskSpec(grid_points=21), split_template=SplitSpec(0.25, seed=4),
                  config=FAST)
    full = run_coverage(small_synth, AlphaMode.relative(0.9), trials=4, **kwargs)
    threaded = run_coverage(small_synth, AlphaMode.relative(0.9), trials=4, threads=3, **kwargs)
    assert full.records == threaded.records
    short = run_coverage(small_synth, AlphaMode.relative(0.9), trials=2, **kwargs)
    assert short.records == full.records[:2]


def test_coverage_rejects_zero_trials(small_synth):
    with pytest.raises(ValidationError):
        run_coverage(small_synth, 0.2, RiskSpec(), trials=0)


# ----------------------------------------------------------------- tradeoff

def test_tradeoff_endpoints(small_synth):
    cfg = TplConfig(k=5, m=50)
    sweep = run_tradeoff_sweep(small_synth, cfg, np.linspace(0, 1, 11), seed=2)
    assert sweep.mean_ndcg[0] == pytest.approx(sweep.pl["mean_ndcg"], abs=1e-12)
    assert sweep.mean_disparity[0] == pytest.approx(sweep.pl["mean_disparity"], abs=1e-12)
    assert sweep.mean_ndcg[-1] == pytest.approx(sweep.deterministic["mean_ndcg"], abs=1e-12)
    assert sweep.mean_disparity[-1] == pytest.approx(sweep.deterministic["mean_disparity"],
                                                     abs=1e-12)


def test_tradeoff_rejects_bad_grid(small_synth):
    with pytest.raises(ValidationError):
        run_tradeoff_sweep(small_synth, FAST, [])
    with pytest.raises(ValidationError):
        run_tradeoff_sweep(small_synth, FAST, [0.5, 0.1])


# ------------------------------------------------------------------ reports

@pytest.fixture(scope="module")
def coverage_report(small_synth):
    return run_coverage(small_synth, AlphaMode.relative(0.9), RiskSpec(grid_points=21), trials=2,
                        split_template=SplitSpec(0.25, seed=8), config=FAST)


def test_emit_coverage_json_round_trip(tmp_path, coverage_report):
    path = tmp_path / "c.json"
    emit_report(coverage_report, path)
    assert json.loads(path.read_text()) == json.loads(json.dumps(coverage_report.to_dict()))


def test_emit_coverage_csv_header(tmp_path, coverage_report):
    path = tmp_path / "c.csv"
    emit_report(coverage_report, path, "csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema_version=1"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == COVERAGE_CSV_HEADER and len(rows) == 3


def test_emit_tradeoff_csv_and_empty_guard(tmp_path, small_synth):
    sweep = run_tradeoff_sweep(small_synth, FAST, [0.0, 1.0])
    path = tmp_path / "t.csv"
    emit_report(sweep, path, "csv")
    assert list(csv.reader(path.read_text().splitlines()[1:]))[0] == TRADEOFF_CSV_HEADER
    empty = TradeoffCurve([], [], [], [], [])
    with pytest.raises(ValidationError, match="empty"):
        emit_report(empty, tmp_path / "e.csv", "csv")
    assert not (tmp_path / "e.csv").exists()


def test_emit_errors(tmp_path, coverage_report):
    with pytest.raises(ValidationError):
        emit_report(coverage_report, tmp_path / "x", "xml")
    with pytest.raises(OSError, match="cannot write"):
        emit_report(coverage_report, tmp_path / "missing" / "x.json")
