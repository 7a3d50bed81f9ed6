"""Retrieval metrics, TREC run I/O and the shuffled-query robustness sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import Passage, Query
from .errors import ParseError
from .index import DenseIndex, search_queries
from .model import EncoderParams
from .noise import shuffle_proportion
from .rng import stream

log = logging.getLogger(__name__)

# qid -> [(pid, score), ...] in rank order
Run = dict


@dataclass
class MetricReport:
    name: str
    k: int
    value: float
    per_query: dict[int, float] = field(default_factory=dict)


def _mean(per_query: Mapping[int, float]) -> float:
    if not per_query:
        return 0.0
    return math.fsum(per_query[q] for q in sorted(per_query)) / len(per_query)


def _check_k(k):
    if k < 1:
        raise ValueError("k must be >= 1")


def mrr_per_query(run: Run, qrels, k: int) -> dict[int, float]:
    _check_k(k)
    out = {}
    for qid, ranked in run.items():
        if qid not in qrels:
            raise KeyError(f"query {qid} has no judgments at all")
        judged = qrels[qid]
        out[qid] = 0.0
        for rank, (pid, _) in enumerate(ranked[:k], start=1):
            if judged.get(pid, 0) >= 1:
                out[qid] = 1.0 / rank
                break
    return out


def recall_per_query(run: Run, qrels, k: int) -> dict[int, float]:
    _check_k(k)
    out = {}
    for qid, ranked in run.items():
        relevant = {pid for pid, rel in qrels.get(qid, {}).items() if rel >= 1}
        if not relevant:
            log.warning("query %s has no relevant passages; excluded from recall", qid)
            continue
        hits = relevant.intersection(pid for pid, _ in ranked[:k])
        out[qid] = len(hits) / len(relevant)
    return out


def answer_recall_per_query(run: Run, queries: Mapping[int, Query], corpus: Mapping[int, Passage],
                            k: int) -> dict[int, float]:
    _check_k(k)
    out = {}
    for qid, ranked in run.items():
        answers = [a.lower() for a in queries[qid].answers]
        if not answers:
            log.warning("query %s has no answer strings; excluded from answer recall", qid)
            continue
        texts = (corpus[pid].text.lower() for pid, _ in ranked[:k])
        out[qid] = float(any(a in t for t in texts for a in answers))
    return out


def ndcg_per_query(run: Run, qrels, k: int) -> dict[int, float]:
    _check_k(k)
    out = {}
    for qid, ranked in run.items():
        judged = qrels.get(qid, {})
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = sum((2.0**rel - 1.0) / math.log2(i + 2) for i, rel in enumerate(ideal))
        if idcg == 0:
            continue
        dcg = sum((2.0 ** judged.get(pid, 0) - 1.0) / math.log2(i + 2) for i, (pid, _) in enumerate(ranked[:k]))
        out[qid] = dcg / idcg
    return out


def mrr_at_k(run: Run, qrels, k: int = 10) -> float:
    return _mean(mrr_per_query(run, qrels, k))


def recall_at_k(run: Run, qrels, k: int) -> float:
    return _mean(recall_per_query(run, qrels, k))


def answer_recall_at_k(run: Run, queries, corpus, k: int) -> float:
    return _mean(answer_recall_per_query(run, queries, corpus, k))


def ndcg_at_k(run: Run, qrels, k: int = 10) -> float:
    return _mean(ndcg_per_query(run, qrels, k))


def evaluate_run(run: Run, qrels, *, mrr_k=(10,), recall_k=(), ndcg_k=(), answer_k=(),
                 queries=None, corpus=None) -> list[MetricReport]:
    reports = []
    for k in mrr_k:
        pq = mrr_per_query(run, qrels, k)
        reports.append(MetricReport("mrr", k, _mean(pq), pq))
    for k in recall_k:
        pq = recall_per_query(run, qrels, k)
        reports.append(MetricReport("recall", k, _mean(pq), pq))
    for k in ndcg_k:
        pq = ndcg_per_query(run, qrels, k)
        reports.append(MetricReport("ndcg", k, _mean(pq), pq))
    for k in answer_k:
        pq = answer_recall_per_query(run, queries, corpus, k)
        reports.append(MetricReport("answer_recall", k, _mean(pq), pq))
    return reports


def write_metrics(reports: Sequence[MetricReport], path, per_query_path=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,k,value\n")
        for r in reports:
            fh.write(f"{r.name},{r.k},{r.value:.9g}\n")
    if per_query_path is not None:
        with open(per_query_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("metric,k,qid,value\n")
            for r in reports:
                for qid in sorted(r.per_query):
                    fh.write(f"{r.name},{r.k},{qid},{r.per_query[qid]:.9g}\n")


def write_run(run: Run, path, tag: str = "nstr") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, ranked in run.items():
            for rank, (pid, score) in enumerate(ranked, start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {float(score)!r} {tag}\n")


def load_run(path) -> Run:
    rows: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(path, line_no, "expected 'qid Q0 pid rank score tag'")
            try:
                qid, pid, rank, score = int(parts[0]), int(parts[2]), int(parts[3]), float(parts[4])
            except ValueError:
                raise ParseError(path, line_no, "malformed run row") from None
            rows.setdefault(qid, []).append((rank, pid, score))
    run = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: (e[0], -e[2], e[1]))
        run[qid] = [(pid, score) for _, pid, score in entries]
    return run


def robustness_sweep(params: EncoderParams, query_tokens: Mapping[int, np.ndarray], index: DenseIndex,
                     qrels, proportions: Sequence[float], seed: int = 0, k: int = 10):
    """MRR@``k`` after shuffling a fixed proportion of every query's tokens.

    Each proportion uses its own stream, so rows are independent of which
    other proportions are evaluated.
    """
    table = []
    for p in proportions:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"proportion {p} outside [0, 1]")
        rng = stream(seed, f"robustness-{float(p)!r}")
        perturbed = {qid: shuffle_proportion(toks, p, rng) for qid, toks in query_tokens.items()}
        run = search_queries(params, index, perturbed, k)
        table.append((float(p), mrr_at_k(run, qrels, k)))
    return table
