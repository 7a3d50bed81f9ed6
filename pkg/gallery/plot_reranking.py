"""
Teacher and student rerankers
=============================

A small cross-encoder is trained on teacher-mined negatives, then a
student reranker distils it on the synthetic soft-label candidate sets.
Both rerank the student retriever's top 50.
"""

from nstr.experiments import benchmark_seed

result = benchmark_seed(0)
for key in ("teacher", "student", "teacher_reranker", "student_reranker"):
    print(f"{key:>17}  MRR@10 = {result.values[key]:.3f}")
