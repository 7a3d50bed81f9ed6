from __future__ import annotations

import math

import numpy as np
import pytest

from nstr.benchmark import generate_benchmark
from nstr.corpus import Passage, Query
from nstr.evaluation import (
    MetricReport,
    answer_recall_at_k,
    evaluate_run,
    load_run,
    mrr_at_k,
    ndcg_at_k,
    recall_at_k,
    robustness_sweep,
    write_metrics,
    write_run,
)
from nstr.index import build_dense_index, search_queries
from nstr.pipeline import (
    PipelineConfig,
    prepare_corpus,
    prepare_queries,
    train_teacher_two_stage,
)

EXACT = 1e-9


def ranked(*pids):
    return [(p, float(-i)) for i, p in enumerate(pids)]


class TestMRR:
    def test_rank_three(self):
        assert abs(mrr_at_k({1: ranked(7, 8, 9)}, {1: {9: 1}}, 10) - 1 / 3) < EXACT

    def test_two_queries(self):
        run = {1: ranked(0, 5, 6), 2: ranked(0, 1, 2, 3, 9)}
        assert abs(mrr_at_k(run, {1: {5: 1}, 2: {9: 1}}, 10) - 0.35) < EXACT

    def test_outside_cutoff(self):
        assert mrr_at_k({1: ranked(0, 1, 2)}, {1: {2: 1}}, 2) == 0.0

    def test_zero_relevance_ignored(self):
        assert mrr_at_k({1: ranked(0, 1)}, {1: {0: 0, 1: 1}}, 10) == 0.5

    def test_judged_without_positives(self):
        assert mrr_at_k({1: ranked(0)}, {1: {}}, 10) == 0.0

    def test_unknown_query(self):
        with pytest.raises(KeyError):
            mrr_at_k({1: ranked(0)}, {2: {0: 1}}, 10)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            mrr_at_k({}, {}, 0)


class TestRecall:
    def test_half(self):
        assert abs(recall_at_k({1: ranked(1, 3, 4)}, {1: {1: 1, 2: 1}}, 3) - 0.5) < EXACT

    def test_three_query_fixture(self):
        run = {1: ranked(1, 2, 3, 4), 2: ranked(9, 8, 7, 6), 3: ranked(5, 6, 7, 8)}
        qrels = {1: {1: 1, 4: 1}, 2: {6: 1, 8: 1, 10: 1}, 3: {5: 2}}
        # k=3: q1 1/2, q2 1/3, q3 1
        assert abs(recall_at_k(run, qrels, 3) - (0.5 + 1 / 3 + 1.0) / 3) < EXACT

    def test_excludes_unjudged(self, caplog):
        run = {1: ranked(1), 2: ranked(1)}
        assert recall_at_k(run, {1: {1: 1}, 2: {}}, 1) == 1.0
        assert "excluded" in caplog.text


class TestAnswerRecall:
    def corpus(self):
        return {
            0: Passage(0, "The Eiffel tower stands in Paris."),
            1: Passage(1, "Berlin has a wall."),
            2: Passage(2, "Nothing relevant here."),
            3: Passage(3, "ROMA and Rome are the same city"),
        }

    def test_case_insensitive(self):
        queries = {1: Query(1, "where", ("paris",))}
        assert answer_recall_at_k({1: ranked(0)}, queries, self.corpus(), 1) == 1.0

    def test_four_query_fixture(self):
        queries = {
            1: Query(1, "a", ("paris",)),
            2: Query(2, "b", ("berlin",)),
            3: Query(3, "c", ("madrid", "rome")),
            4: Query(4, "d", ("wall",)),
        }
        run = {1: ranked(2, 0), 2: ranked(2, 0), 3: ranked(3), 4: ranked(2, 3, 1)}
        # k=2: q1 hit at rank 2, q2 miss, q3 hit through its second answer, q4 hit only at rank 3
        assert abs(answer_recall_at_k(run, queries, self.corpus(), 2) - 2 / 4) < EXACT
        assert abs(answer_recall_at_k(run, queries, self.corpus(), 3) - 3 / 4) < EXACT

    def test_no_answers_excluded(self):
        queries = {1: Query(1, "a", ("paris",)), 2: Query(2, "b")}
        assert answer_recall_at_k({1: ranked(0), 2: ranked(2)}, queries, self.corpus(), 1) == 1.0


class TestNDCG:
    def test_ideal(self):
        assert ndcg_at_k({1: ranked(3, 2, 1)}, {1: {3: 2, 2: 1}}, 10) == pytest.approx(1.0, abs=EXACT)

    def test_rank_two(self):
        value = ndcg_at_k({1: ranked(0, 1)}, {1: {1: 1}}, 10)
        assert abs(value - 1 / math.log2(3)) < EXACT
        assert abs(value - 0.6309) < 1e-4

    def test_graded_fixture(self):
        # ranking c, b, a with grades a=2 b=1 c=0
        dcg = 0.0 + 1.0 / math.log2(3) + 3.0 / math.log2(4)
        idcg = 3.0 + 1.0 / math.log2(3)
        assert abs(ndcg_at_k({1: ranked(30, 20, 10)}, {1: {10: 2, 20: 1, 30: 0}}, 10) - dcg / idcg) < EXACT

    def test_idcg_zero_excluded(self):
        run = {1: ranked(0), 2: ranked(5)}
        assert ndcg_at_k(run, {1: {0: 1}, 2: {5: 0}}, 10) == 1.0


class TestReports:
    def test_perfect_and_disjoint(self):
        qrels = {1: {1: 1}, 2: {2: 1}}
        queries = {1: Query(1, "x", ("alpha",)), 2: Query(2, "y", ("beta",))}
        corpus = {1: Passage(1, "alpha"), 2: Passage(2, "beta"), 3: Passage(3, "gamma"), 4: Passage(4, "delta")}
        kw = dict(mrr_k=(10,), recall_k=(1,), ndcg_k=(10,), answer_k=(1,), queries=queries, corpus=corpus)
        perfect = evaluate_run({1: ranked(1), 2: ranked(2)}, qrels, **kw)
        assert all(r.value == 1.0 for r in perfect)
        disjoint = evaluate_run({1: ranked(3), 2: ranked(4)}, qrels, **kw)
        assert all(r.value == 0.0 for r in disjoint)

    def test_aggregate_is_mean(self):
        (report,) = evaluate_run({1: ranked(0, 5), 2: ranked(5)}, {1: {5: 1}, 2: {5: 1}})
        assert report.value == pytest.approx(np.mean(list(report.per_query.values())), abs=EXACT)

    def test_metrics_csv(self, tmp_path):
        reports = [MetricReport("mrr", 10, 0.5, {1: 1.0, 2: 0.0})]
        write_metrics(reports, tmp_path / "m.csv", tmp_path / "pq.csv")
        assert (tmp_path / "m.csv").read_text().splitlines() == ["metric,k,value", "mrr,10,0.5"]
        assert len((tmp_path / "pq.csv").read_text().splitlines()) == 3

    def test_run_round_trip(self, tmp_path):
        run = {1: [(5, 2.5), (3, 1.25)], 2: [(7, 0.1)]}
        write_run(run, tmp_path / "r.trec")
        assert load_run(tmp_path / "r.trec") == run


@pytest.fixture(scope="module")
def trained():
    cfg = PipelineConfig(seed=0, positional_scale=1.0)
    bench = generate_benchmark(0, 400, 100, 50)
    corpus = prepare_corpus(bench.passages, bench.train_queries, cfg)
    gold = prepare_queries(bench.train_queries, bench.train_qrels, corpus, cfg)
    evalset = prepare_queries(bench.eval_queries, bench.eval_qrels, corpus, cfg)
    _, teacher, _ = train_teacher_two_stage(corpus, gold, cfg)
    return teacher, evalset, build_dense_index(teacher, passage_tokens=corpus.passage_tokens)


class TestRobustness:
    def test_shape_and_identity(self, trained):
        params, evalset, index = trained
        table = robustness_sweep(params, evalset.tokens, index, evalset.qrels, [0.0, 0.5, 1.0], seed=3)
        assert [p for p, _ in table] == [0.0, 0.5, 1.0]
        base = mrr_at_k(search_queries(params, index, evalset.tokens, 10), evalset.qrels, 10)
        assert table[0][1] == base

    def test_deterministic(self, trained):
        params, evalset, index = trained
        args = (params, evalset.tokens, index, evalset.qrels, [0.3, 0.6])
        assert robustness_sweep(*args, seed=1) == robustness_sweep(*args, seed=1)

    def test_rejects_bad_proportion(self, trained):
        params, evalset, index = trained
        with pytest.raises(ValueError):
            robustness_sweep(params, evalset.tokens, index, evalset.qrels, [1.5])


def test_order_sensitive_mrr_non_increasing_in_expectation():
    """Median over 5 seeds of the expected MRR@10 at each shuffle proportion.

    The expectation over shuffles is estimated from 20 draws per seed, and
    each step may rise by at most 3 standard errors of that estimate, since
    proportions that round to the same number of shuffled positions have
    equal expectations.
    """
    proportions = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    draws_per_seed = 20
    means, step_se = [], []
    for seed in range(5):
        cfg = PipelineConfig(seed=seed, positional_scale=1.0)
        bench = generate_benchmark(seed, 2000, 300, 200)
        corpus = prepare_corpus(bench.passages, bench.train_queries, cfg)
        gold = prepare_queries(bench.train_queries, bench.train_qrels, corpus, cfg)
        evalset = prepare_queries(bench.eval_queries, bench.eval_qrels, corpus, cfg)
        _, teacher, _ = train_teacher_two_stage(corpus, gold, cfg)
        index = build_dense_index(teacher, passage_tokens=corpus.passage_tokens)
        draws = np.array([
            [v for _, v in robustness_sweep(teacher, evalset.tokens, index, evalset.qrels, proportions,
                                            seed * 1000 + d)]
            for d in range(draws_per_seed)
        ])
        means.append(draws.mean(axis=0))
        step_se.append(np.diff(draws, axis=1).std(axis=0, ddof=1) / np.sqrt(draws_per_seed))
    median = np.median(means, axis=0)
    tolerance = 3 * np.median(step_se, axis=0)
    steps = np.diff(median)
    assert np.all(steps <= tolerance), (median.round(4).tolist(), steps.round(4).tolist(), tolerance.round(4).tolist())
