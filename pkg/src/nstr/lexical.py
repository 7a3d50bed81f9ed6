"""BM25 over an in-memory inverted index.

Lucene-style smoothed idf ``ln(1 + (N - df + 0.5) / (df + 0.5))``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .corpus import MASK, MAX_PASSAGE_LEN, Passage, Vocabulary, tokenize_collection
from .errors import EmptyInputError

K1 = 0.9
B = 0.4


@dataclass
class InvertedIndex:
    postings: dict[int, list[tuple[int, int]]]
    doc_len: dict[int, int]
    avgdl: float
    N: int
    df: dict[int, int]

    def save(self, path) -> None:
        payload = {
            "N": self.N,
            "avgdl": self.avgdl,
            "doc_len": [[pid, n] for pid, n in self.doc_len.items()],
            "postings": {str(t): plist for t, plist in self.postings.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        postings = {int(t): [tuple(x) for x in plist] for t, plist in payload["postings"].items()}
        return cls(
            postings=postings,
            doc_len={pid: n for pid, n in payload["doc_len"]},
            avgdl=payload["avgdl"],
            N=payload["N"],
            df={t: len(plist) for t, plist in postings.items()},
        )


def build_inverted_index(
    passages: Mapping[int, Passage], vocab: Vocabulary, max_len: int = MAX_PASSAGE_LEN
) -> InvertedIndex:
    if not passages:
        raise EmptyInputError("cannot index an empty collection")
    tokens = tokenize_collection(passages, vocab, max_len)
    postings: dict[int, list[tuple[int, int]]] = {}
    doc_len = {}
    for pid in sorted(tokens):
        ids = tokens[pid]
        doc_len[pid] = int(len(ids))
        for tok, tf in sorted(Counter(ids.tolist()).items()):
            if tok <= MASK:
                continue
            postings.setdefault(tok, []).append((pid, tf))
    postings = dict(sorted(postings.items()))
    n = len(doc_len)
    return InvertedIndex(
        postings=postings,
        doc_len=doc_len,
        avgdl=sum(doc_len.values()) / n,
        N=n,
        df={t: len(plist) for t, plist in postings.items()},
    )


def idf(index: InvertedIndex, token: int) -> float:
    df = index.df.get(token, 0)
    return math.log(1.0 + (index.N - df + 0.5) / (df + 0.5))


def bm25_search(index: InvertedIndex, query, k: int, k1: float = K1, b: float = B):
    """Top-``k`` ``(passage id, score)`` pairs; zero-score passages are omitted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[int, float] = {}
    for tok in np.asarray(query).tolist():
        plist = index.postings.get(tok)
        if not plist:
            continue
        w = idf(index, tok)
        for pid, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_len[pid] / index.avgdl)
            scores[pid] = scores.get(pid, 0.0) + w * tf * (k1 + 1.0) / (tf + norm)
    ranked = sorted(((pid, s) for pid, s in scores.items() if s > 0.0), key=lambda x: (-x[1], x[0]))
    return ranked[:k]
