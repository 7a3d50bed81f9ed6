"""Exact dense retrieval and hard-negative mining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import MAX_PASSAGE_LEN, Passage, Vocabulary, tokenize_collection
from .errors import EmptyInputError, ParseError
from .model import EncoderParams, encode_batch


@dataclass
class DenseIndex:
    ids: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        if len(self.ids) != self.embeddings.shape[0]:
            raise ValueError("row count does not match id count")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite embedding in index")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_dense_index(params: EncoderParams, passages: Mapping[int, Passage] | None = None,
                      vocab: Vocabulary | None = None, max_len: int = MAX_PASSAGE_LEN,
                      passage_tokens: Mapping[int, np.ndarray] | None = None) -> DenseIndex:
    """Encode every passage; pass ``passage_tokens`` to skip re-tokenizing."""
    if passage_tokens is None:
        if not passages:
            raise EmptyInputError("cannot index an empty collection")
        passage_tokens = tokenize_collection(passages, vocab, max_len)
    if not passage_tokens:
        raise EmptyInputError("cannot index an empty collection")
    ids = np.fromiter(passage_tokens.keys(), dtype=np.int64, count=len(passage_tokens))
    return DenseIndex(ids, encode_batch(params, list(passage_tokens.values())))


def _rank(ids, scores, k):
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def dense_search(index: DenseIndex, q_vec, k: int):
    """Exact top-``k`` by dot product; ties go to the smaller passage id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q_vec = np.asarray(q_vec, dtype=np.float64)
    if q_vec.shape != (index.dim,):
        raise ValueError(f"dimension mismatch: query {q_vec.shape}, index d={index.dim}")
    return _rank(index.ids, index.embeddings @ q_vec, k)


def search_batch(index: DenseIndex, q_vecs: np.ndarray, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    q_vecs = np.atleast_2d(np.asarray(q_vecs, dtype=np.float64))
    if q_vecs.shape[1] != index.dim:
        raise ValueError(f"dimension mismatch: query d={q_vecs.shape[1]}, index d={index.dim}")
    scores = q_vecs @ index.embeddings.T
    return [_rank(index.ids, row, k) for row in scores]


def search_queries(params: EncoderParams, index: DenseIndex, query_tokens: Mapping[int, np.ndarray], k: int):
    """Run every query and return ``{qid: [(pid, score), ...]}``."""
    qids = list(query_tokens)
    if not qids:
        return {}
    results = search_batch(index, encode_batch(params, [query_tokens[q] for q in qids]), k)
    return dict(zip(qids, results))


def mine_hard_negatives(index: DenseIndex, params: EncoderParams, pairs: Sequence[tuple[int, int]],
                        query_tokens: Mapping[int, np.ndarray], pool_size: int = 100) -> dict[int, list[int]]:
    """Top-``pool_size`` neighbours of each query with its gold passage removed."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if len(index) < 2:
        raise EmptyInputError("negative mining needs at least 2 passages")
    runs = search_queries(params, index, {qid: query_tokens[qid] for qid, _ in pairs}, pool_size + 1)
    return exclude_gold(runs, pairs, pool_size)


def exclude_gold(runs, pairs, pool_size):
    gold: dict[int, set] = {}
    for qid, pid in pairs:
        gold.setdefault(qid, set()).add(pid)
    return {
        qid: [pid for pid, _ in runs[qid] if pid not in gold[qid]][:pool_size]
        for qid in gold
    }


def write_pools(pools: Mapping[int, Sequence[int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, pids in pools.items():
            fh.write(f"{qid}\t{','.join(str(p) for p in pids)}\n")


def load_pools(path) -> dict[int, list[int]]:
    pools = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            qid, _, rest = line.partition("\t")
            try:
                pools[int(qid)] = [int(x) for x in rest.split(",")] if rest else []
            except ValueError:
                raise ParseError(path, line_no, "malformed negative pool row") from None
    return pools
