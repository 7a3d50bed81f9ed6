"""
Self-training a dual encoder on the toy benchmark
==================================================

Generate a small seeded benchmark, run one round of noisy self-training
and compare the teacher with the student on held-out queries.
"""

from nstr.benchmark import generate_benchmark
from nstr.evaluation import mrr_at_k
from nstr.pipeline import (
    PipelineConfig,
    dense_run,
    prepare_corpus,
    prepare_queries,
    run_self_training,
    synthetic_query_set,
)
from nstr.querygen import SpanSampler, generate_synthetic

config = PipelineConfig(seed=0)
bench = generate_benchmark(seed=0, n_passages=2000, n_train=300, n_eval=200)

corpus = prepare_corpus(bench.passages, bench.train_queries, config)
gold = prepare_queries(bench.train_queries, bench.train_qrels, corpus, config)
evalset = prepare_queries(bench.eval_queries, bench.eval_qrels, corpus, config)

# %%
# One span-sampled query per passage plays the role of the synthetic set.
pairs = generate_synthetic(bench.passages, SpanSampler(), 1, seed=0)
synthetic = synthetic_query_set(pairs, corpus, config)
print(pairs[0].query.text, "->", bench.passages[pairs[0].passage_id].text)

manifest = run_self_training(corpus, gold, synthetic, config, evalset=evalset)
for row in manifest.metrics:
    print(row)

# %%
# The manifest keeps every stage's parameters in memory as well.
for stage in ("teacher_s2", "iter1_finetune"):
    run = dense_run(manifest.params[stage], corpus, evalset, 10)
    print(f"{stage:>15}  MRR@10 = {mrr_at_k(run, evalset.qrels, 10):.3f}")
