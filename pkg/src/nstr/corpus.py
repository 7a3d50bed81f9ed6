"""Corpus ingestion, vocabulary and tokenization.

Collections are plain ``dict`` objects keyed by id; insertion order is the
file order. File formats are headerless UTF-8 TSV.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DuplicateKeyError, EmptyInputError, ParseError, ReferentialError

PAD, UNK, MASK = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[MASK]")

MAX_QUERY_LEN = 32
MAX_PASSAGE_LEN = 128


@dataclass(frozen=True)
class Passage:
    id: int
    text: str


@dataclass(frozen=True)
class Query:
    id: int
    text: str
    answers: tuple[str, ...] = ()


@dataclass(frozen=True)
class QRel:
    query_id: int
    passage_id: int
    relevance: int


# qid -> {pid: relevance}
QRelSet = dict


def _read_lines(path):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line == "":
                continue
            yield line_no, line


def _parse_id(path, line_no, raw, what="id"):
    try:
        value = int(raw)
    except ValueError:
        raise ParseError(path, line_no, f"non-integer {what} {raw!r}") from None
    if value < 0:
        raise ParseError(path, line_no, f"negative {what} {value}")
    return value


def load_passages(path) -> dict[int, Passage]:
    passages: dict[int, Passage] = {}
    for line_no, line in _read_lines(path):
        if "\t" not in line:
            raise ParseError(path, line_no, "missing TAB separator")
        raw_id, text = line.split("\t", 1)
        pid = _parse_id(path, line_no, raw_id)
        if not text.strip():
            raise ParseError(path, line_no, "empty passage text")
        if pid in passages:
            raise DuplicateKeyError(f"{path}:{line_no}: duplicate passage id {pid}")
        passages[pid] = Passage(pid, text)
    return passages


def load_queries(path, qrels_path=None) -> tuple[dict[int, Query], QRelSet]:
    """Load ``id<TAB>text[<TAB>a1|a2]`` queries and optional TREC qrels."""
    queries: dict[int, Query] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) < 2:
            raise ParseError(path, line_no, "missing TAB separator")
        if len(parts) > 3:
            raise ParseError(path, line_no, f"expected 2 or 3 fields, got {len(parts)}")
        qid = _parse_id(path, line_no, parts[0])
        if not parts[1].strip():
            raise ParseError(path, line_no, "empty query text")
        answers: tuple[str, ...] = ()
        if len(parts) == 3 and parts[2]:
            answers = tuple(a for a in parts[2].split("|") if a)
        if qid in queries:
            raise DuplicateKeyError(f"{path}:{line_no}: duplicate query id {qid}")
        queries[qid] = Query(qid, parts[1], answers)

    qrels: QRelSet = {}
    if qrels_path is not None:
        qrels = load_qrels(qrels_path)
        for qid in qrels:
            if qid not in queries:
                raise ReferentialError(f"{qrels_path}: qrel references unknown query id {qid}")
    return queries, qrels


def load_qrels(path) -> QRelSet:
    qrels: QRelSet = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(path, line_no, f"expected 4 fields, got {len(parts)}")
        qid = _parse_id(path, line_no, parts[0], "query id")
        pid = _parse_id(path, line_no, parts[2], "passage id")
        rel = _parse_id(path, line_no, parts[3], "relevance")
        judged = qrels.setdefault(qid, {})
        if pid in judged:
            raise DuplicateKeyError(f"{path}:{line_no}: duplicate qrel ({qid}, {pid})")
        judged[pid] = rel
    return qrels


def write_passages(passages: Mapping[int, Passage], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in passages.values():
            fh.write(f"{p.id}\t{p.text}\n")


def write_queries(queries: Mapping[int, Query], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries.values():
            if q.answers:
                fh.write(f"{q.id}\t{q.text}\t{'|'.join(q.answers)}\n")
            else:
                fh.write(f"{q.id}\t{q.text}\n")


def write_qrels(qrels: QRelSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, judged in qrels.items():
            for pid, rel in judged.items():
                fh.write(f"{qid}\t0\t{pid}\t{rel}\n")


def gold_pairs(qrels: QRelSet) -> list[tuple[int, int]]:
    """One ``(query id, positive passage id)`` pair per relevant judgment."""
    return [
        (qid, pid) for qid, judged in qrels.items() for pid, rel in judged.items() if rel >= 1
    ]


def _is_punct(ch):
    return unicodedata.category(ch).startswith("P") or unicodedata.category(ch).startswith("S")


def words(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip punctuation at word boundaries."""
    out = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if start < end:
            out.append(raw[start:end])
    return out


@dataclass
class Vocabulary:
    tokens: list[str]
    min_frequency: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise DuplicateKeyError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        for line_no, line in _read_lines(path):
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected token<TAB>id")
            rows.append((_parse_id(path, line_no, parts[1]), parts[0]))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ParseError(path, 0, "vocabulary ids are not contiguous from 0")
        return cls([t for _, t in rows])


def build_vocab(
    passages: Iterable[Passage] | Mapping[int, Passage],
    queries: Iterable[Query] | Mapping[int, Query] | None = None,
    min_frequency: int = 1,
) -> Vocabulary:
    """Frequency-sorted vocabulary; ties broken lexicographically."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    if isinstance(passages, Mapping):
        passages = passages.values()
    if isinstance(queries, Mapping):
        queries = queries.values()
    counts: Counter = Counter()
    n_texts = 0
    for item in list(passages) + list(queries or ()):
        counts.update(words(item.text))
        n_texts += 1
    if n_texts == 0 or not counts:
        raise EmptyInputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, min_frequency)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.lookup(w) for w in words(text)[:max_len]]
    if not ids:
        raise EmptyInputError(f"text is empty after tokenization: {text!r}")
    return np.asarray(ids, dtype=np.int64)


def tokenize_collection(items: Mapping[int, Passage | Query], vocab: Vocabulary, max_len: int):
    """Tokenize every record, naming the offending id on failure."""
    out = {}
    for key, item in items.items():
        try:
            out[key] = tokenize(item.text, vocab, max_len)
        except EmptyInputError as exc:
            raise EmptyInputError(f"record {key}: {exc}") from None
    return out
