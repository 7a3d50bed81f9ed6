"""Seeded end-to-end comparisons on the desk-scale benchmark.

:func:`benchmark_seed` runs, for one seed, everything needed to compare
the teacher against the noisy student, the student against the ablation
without pseudo labels, the shuffle robustness of noisy and clean students
(with order-sensitive pooling) and teacher against student rerankers.
:func:`summarize` reduces several seeds to medians.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .benchmark import Benchmark, generate_benchmark
from .evaluation import mrr_at_k, robustness_sweep
from .index import build_dense_index, mine_hard_negatives
from .model import init_cross_params
from .pipeline import (
    PipelineConfig,
    dense_run,
    prepare_corpus,
    prepare_queries,
    rerank_run,
    reranker_soft_labels,
    run_self_training,
    synthetic_query_set,
    train_reranker,
    train_teacher_two_stage,
)
from .querygen import SpanSampler, generate_synthetic
from .rng import stream

ROW_KEYS = (
    "teacher", "student", "no_pseudo_labels",
    "noisy_clean", "noisy_shuffled", "clean_clean", "clean_shuffled",
    "teacher_reranker", "student_reranker", "seconds",
)


@dataclass
class SeedResult:
    seed: int
    values: dict

    @property
    def noisy_drop(self) -> float:
        return relative_drop(self.values["noisy_clean"], self.values["noisy_shuffled"])

    @property
    def clean_drop(self) -> float:
        return relative_drop(self.values["clean_clean"], self.values["clean_shuffled"])


def relative_drop(before: float, after: float) -> float:
    return (before - after) / before if before > 0 else 0.0


def _student(corpus, gold, syn, config, teacher):
    return run_self_training(corpus, gold, syn, config, teacher=teacher)


def benchmark_seed(seed: int, config: PipelineConfig | None = None, *, n_passages: int = 2000,
                   n_train: int = 300, n_eval: int = 200, positional_scale: float = 1.0,
                   shuffle_proportion: float = 0.5, bench: Benchmark | None = None) -> SeedResult:
    start = time.perf_counter()
    config = dataclasses.replace(config or PipelineConfig(), seed=seed)
    bench = bench or generate_benchmark(seed, n_passages, n_train, n_eval)
    corpus = prepare_corpus(bench.passages, bench.train_queries, config)
    gold = prepare_queries(bench.train_queries, bench.train_qrels, corpus, config)
    evalset = prepare_queries(bench.eval_queries, bench.eval_qrels, corpus, config)
    synthetic = synthetic_query_set(
        generate_synthetic(bench.passages, SpanSampler(), config.queries_per_passage, seed), corpus, config)

    def mrr(params, queries=evalset):
        return mrr_at_k(dense_run(params, corpus, queries, 10), queries.qrels, 10)

    out = {}
    _, teacher, _ = train_teacher_two_stage(corpus, gold, config)
    out["teacher"] = mrr(teacher)
    manifest = _student(corpus, gold, synthetic, config, teacher)
    student = manifest.params["iter1_finetune"]
    out["student"] = mrr(student)
    ablation = _student(corpus, gold, synthetic, dataclasses.replace(config, no_pseudo_labels=True), teacher)
    out["no_pseudo_labels"] = mrr(ablation.params["iter1_finetune"])

    # rerankers share the teacher's negatives and rerank the student's top-k
    query_tokens = {**gold.tokens, **synthetic.tokens}
    index = build_dense_index(teacher, passage_tokens=corpus.passage_tokens)
    pools = mine_hard_negatives(index, teacher, gold.pairs, gold.tokens, config.pool_size)
    init = init_cross_params(int(stream(seed, "reranker-init").integers(0, 2**31 - 1)),
                             len(corpus.vocab), config.dim, config.hidden)
    x_teacher, _ = train_reranker(init, gold.pairs, pools, config, query_tokens, corpus.passage_tokens)
    soft = reranker_soft_labels(x_teacher, manifest.soft_labels[1], query_tokens, corpus.passage_tokens,
                                config.soft_label_temperature)
    x_student, _ = train_reranker(x_teacher, gold.pairs, pools, config, query_tokens, corpus.passage_tokens,
                                  soft_labels=soft)
    first_stage = dense_run(student, corpus, evalset, config.rerank_depth)
    for name, params in (("teacher_reranker", x_teacher), ("student_reranker", x_student)):
        reranked = rerank_run(params, first_stage, evalset.tokens, corpus.passage_tokens, config.rerank_depth)
        out[name] = mrr_at_k(reranked, evalset.qrels, 10)

    # shuffle robustness needs order-sensitive pooling
    ordered = dataclasses.replace(config, positional_scale=positional_scale)
    _, ordered_teacher, _ = train_teacher_two_stage(corpus, gold, ordered)
    for name, cfg in (("noisy", ordered), ("clean", dataclasses.replace(ordered, no_noise=True))):
        params = _student(corpus, gold, synthetic, cfg, ordered_teacher).params["iter1_finetune"]
        idx = build_dense_index(params, passage_tokens=corpus.passage_tokens)
        (_, base), (_, shuffled) = robustness_sweep(params, evalset.tokens, idx, evalset.qrels,
                                                    [0.0, shuffle_proportion], seed)
        out[f"{name}_clean"] = base
        out[f"{name}_shuffled"] = shuffled
    out["seconds"] = time.perf_counter() - start
    return SeedResult(seed, out)


def summarize(results: Sequence[SeedResult]) -> dict:
    """Medians over seeds of every measured value and of both relative drops."""
    if not results:
        raise ValueError("no results to summarize")
    med = {k: float(np.median([r.values[k] for r in results])) for k in ROW_KEYS}
    med["noisy_drop"] = float(np.median([r.noisy_drop for r in results]))
    med["clean_drop"] = float(np.median([r.clean_drop for r in results]))
    med["total_seconds"] = float(sum(r.values["seconds"] for r in results))
    return med


def directional_checks(summary: dict) -> dict[str, bool]:
    return {
        "student >= teacher": summary["student"] >= summary["teacher"],
        "student >= no pseudo labels": summary["student"] >= summary["no_pseudo_labels"],
        "noisy shuffle drop <= clean shuffle drop": summary["noisy_drop"] <= summary["clean_drop"],
        "student reranker >= teacher reranker": summary["student_reranker"] >= summary["teacher_reranker"],
    }
