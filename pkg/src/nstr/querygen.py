"""Synthetic query-passage pairs from a pluggable generator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Protocol

import numpy as np

from .corpus import Passage, Query, words
from .errors import EmptyInputError, ParseError, ReferentialError
from .rng import stream

SYNTHETIC_ID_BASE = 2**30


@dataclass(frozen=True)
class SyntheticPair:
    query: Query
    passage_id: int


class QueryGenerator(Protocol):
    def generate(self, passage: Passage, rng: np.random.Generator) -> str: ...


def span_sampler_generate(passage: Passage | str, span_len_range=(3, 8), rng=None, drop=0.2) -> str:
    """Sample a contiguous word span and drop ``floor(drop * len)`` of its words."""
    text = passage.text if isinstance(passage, Passage) else passage
    toks = words(text)
    if not toks:
        raise EmptyInputError("passage has no tokens")
    lo, hi = span_len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid span_len_range {span_len_range}")
    length = min(int(rng.integers(lo, hi + 1)), len(toks))
    start = int(rng.integers(0, len(toks) - length + 1))
    span = toks[start : start + length]
    n_drop = min(int(np.floor(drop * length)), length - 1)
    if n_drop:
        gone = set(rng.choice(length, size=n_drop, replace=False).tolist())
        span = [w for i, w in enumerate(span) if i not in gone]
    return " ".join(span)


@dataclass(frozen=True)
class SpanSampler:
    span_len_range: tuple[int, int] = (3, 8)
    drop: float = 0.2

    def generate(self, passage: Passage, rng: np.random.Generator) -> str:
        return span_sampler_generate(passage, self.span_len_range, rng, self.drop)


def generate_synthetic(passages: Mapping[int, Passage], generator: QueryGenerator,
                       queries_per_passage: int = 1, seed: int = 0) -> list[SyntheticPair]:
    """``queries_per_passage`` pairs per passage.

    Each passage draws from its own stream so the output for a passage does
    not depend on collection order; ids are ``2**30 + pid * qpp + j``.
    """
    if queries_per_passage < 1:
        raise ValueError("queries_per_passage must be >= 1")
    if not passages:
        raise EmptyInputError("cannot generate queries for an empty collection")
    pairs = []
    for pid, passage in passages.items():
        rng = stream(seed, f"querygen-{pid}")
        for j in range(queries_per_passage):
            text = generator.generate(passage, rng)
            if not text.strip():
                raise EmptyInputError(f"generator produced an empty query for passage {pid}")
            qid = SYNTHETIC_ID_BASE + pid * queries_per_passage + j
            pairs.append(SyntheticPair(Query(qid, text), pid))
    return pairs


def load_external_queries(path, passages: Mapping[int, Passage]) -> list[SyntheticPair]:
    """Parse ``query_text<TAB>passage_id`` rows produced by an external generator.

    Query ids are ``2**30 + line_no - 1``.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            text, sep, raw_pid = line.rpartition("\t")
            if not sep or not text.strip():
                raise ParseError(path, line_no, "expected query_text<TAB>passage_id")
            try:
                pid = int(raw_pid)
            except ValueError:
                raise ParseError(path, line_no, f"non-integer passage id {raw_pid!r}") from None
            if pid not in passages:
                raise ReferentialError(f"{path}:{line_no}: unknown passage id {pid}")
            pairs.append(SyntheticPair(Query(SYNTHETIC_ID_BASE + line_no - 1, text), pid))
    return pairs


def write_synthetic(pairs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(f"{pair.query.id}\t{pair.query.text}\t{pair.passage_id}\n")


def load_synthetic(path, passages: Mapping[int, Passage] | None = None) -> list[SyntheticPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, "expected query_id<TAB>query_text<TAB>passage_id")
            try:
                qid, pid = int(parts[0]), int(parts[2])
            except ValueError:
                raise ParseError(path, line_no, "non-integer id") from None
            if passages is not None and pid not in passages:
                raise ReferentialError(f"{path}:{line_no}: unknown passage id {pid}")
            pairs.append(SyntheticPair(Query(qid, parts[1]), pid))
    return pairs
