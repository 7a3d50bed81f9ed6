"""
Shuffled-query robustness
=========================

Mean pooling ignores token order, so shuffling is only visible with
position-weighted pooling. Students trained with and without input noise
are probed by shuffling a growing share of each query's tokens.
"""

import dataclasses

import matplotlib.pyplot as plt

from nstr.benchmark import generate_benchmark
from nstr.evaluation import robustness_sweep
from nstr.index import build_dense_index
from nstr.pipeline import (
    PipelineConfig,
    prepare_corpus,
    prepare_queries,
    run_self_training,
    synthetic_query_set,
    train_teacher_two_stage,
)
from nstr.querygen import SpanSampler, generate_synthetic

config = PipelineConfig(seed=1, positional_scale=1.0)
bench = generate_benchmark(seed=1, n_passages=2000, n_train=300, n_eval=200)
corpus = prepare_corpus(bench.passages, bench.train_queries, config)
gold = prepare_queries(bench.train_queries, bench.train_qrels, corpus, config)
evalset = prepare_queries(bench.eval_queries, bench.eval_qrels, corpus, config)
synthetic = synthetic_query_set(generate_synthetic(bench.passages, SpanSampler(), 1, 1), corpus, config)
_, teacher, _ = train_teacher_two_stage(corpus, gold, config)

proportions = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
for label, cfg in (("noisy", config), ("clean", dataclasses.replace(config, no_noise=True))):
    student = run_self_training(corpus, gold, synthetic, cfg, teacher=teacher).params["iter1_finetune"]
    index = build_dense_index(student, passage_tokens=corpus.passage_tokens)
    table = robustness_sweep(student, evalset.tokens, index, evalset.qrels, proportions, seed=1)
    plt.plot(*zip(*table), marker="o", label=label)

plt.xlabel("share of shuffled query tokens")
plt.ylabel("MRR@10")
plt.legend()
plt.show()
