"""Seeded, templated desk-scale retrieval benchmark.

Passages state one attribute of one entity (``the <attr> of <entity> is
<value>``) followed by up to ``max_filler`` filler sentences, some of
which mention other entities. Gold queries ask for the attribute of an
entity, often through a query-side synonym of the attribute word, so a
retriever has to learn the synonym mapping from the training pairs.
Every (entity, attribute) pair occurs in at most one passage, so each
query has exactly one relevant passage and its answer string is the
value word.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import Passage, Query, write_passages, write_qrels, write_queries
from .rng import stream

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
CODAS = ["", "", "n", "r", "l", "s", "x"]

FILLER_TEMPLATES = [
    "records from the {f1} archive mention {f2} and {f3}",
    "it is often said that {f1} {f2} remains {f3}",
    "{e} is sometimes compared with {e2} in {f1} studies",
    "many {f1} visitors describe {f2} {f3}",
    "some {f1} sources link {e} to {e2}",
    "the {f1} survey lists {f2} near {f3}",
    "local {f1} accounts note {f2} {f3}",
]

QUERY_TEMPLATES = [
    "what is the {a} of {e}",
    "{e} {a}",
    "tell me the {a} of {e}",
    "which {a} does {e} have",
]

N_ATTRIBUTES = 12
VALUES_PER_ATTRIBUTE = 24
N_FILLER = 120


@dataclass
class Benchmark:
    passages: dict[int, Passage]
    train_queries: dict[int, Query]
    train_qrels: dict
    eval_queries: dict[int, Query]
    eval_qrels: dict

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "passages": out / "passages.tsv",
            "train_queries": out / "train_queries.tsv",
            "train_qrels": out / "train_qrels.tsv",
            "eval_queries": out / "eval_queries.tsv",
            "eval_qrels": out / "eval_qrels.tsv",
        }
        write_passages(self.passages, paths["passages"])
        write_queries(self.train_queries, paths["train_queries"])
        write_qrels(self.train_qrels, paths["train_qrels"])
        write_queries(self.eval_queries, paths["eval_queries"])
        write_qrels(self.eval_qrels, paths["eval_qrels"])
        return paths


def _pseudo_words(rng, n, taken):
    out = []
    while len(out) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(
            ONSETS[rng.integers(len(ONSETS))] + VOWELS[rng.integers(len(VOWELS))] for _ in range(n_syl)
        ) + CODAS[rng.integers(len(CODAS))]
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate_benchmark(seed: int = 0, n_passages: int = 2000, n_train: int = 300, n_eval: int = 200,
                       out_dir=None, synonym_rate: float = 0.7, passages_per_entity: int = 4,
                       max_filler: int = 1) -> Benchmark:
    if n_train < 1 or n_eval < 1 or n_passages < n_train + n_eval:
        raise ValueError("need n_train >= 1, n_eval >= 1 and n_passages >= n_train + n_eval")
    rng = stream(seed, "benchmark")
    taken: set[str] = set()
    n_entities = max(2, -(-n_passages // passages_per_entity))
    entities = _pseudo_words(rng, n_entities, taken)
    attrs = _pseudo_words(rng, N_ATTRIBUTES, taken)
    synonyms = _pseudo_words(rng, N_ATTRIBUTES, taken)
    values = [_pseudo_words(rng, VALUES_PER_ATTRIBUTE, taken) for _ in range(N_ATTRIBUTES)]
    filler = _pseudo_words(rng, N_FILLER, taken)

    combos = rng.choice(n_entities * N_ATTRIBUTES, size=n_passages, replace=False)
    passages: dict[int, Passage] = {}
    facts = []
    for pid, combo in enumerate(combos.tolist()):
        e, a = divmod(combo, N_ATTRIBUTES)
        value = values[a][rng.integers(VALUES_PER_ATTRIBUTE)]
        sentences = [f"the {attrs[a]} of {entities[e]} is {value}"]
        for _ in range(int(rng.integers(min(1, max_filler), max_filler + 1))):
            tmpl = FILLER_TEMPLATES[rng.integers(len(FILLER_TEMPLATES))]
            f1, f2, f3 = (filler[i] for i in rng.choice(N_FILLER, size=3, replace=False))
            e2 = entities[rng.integers(n_entities)]
            sentences.append(tmpl.format(f1=f1, f2=f2, f3=f3, e=entities[e], e2=e2))
        order = [0] + (1 + rng.permutation(len(sentences) - 1)).tolist()
        passages[pid] = Passage(pid, " . ".join(sentences[i] for i in order) + " .")
        facts.append((e, a, value))

    picked = rng.permutation(n_passages)[: n_train + n_eval].tolist()

    def make_queries(pids, base):
        queries, qrels = {}, {}
        for j, pid in enumerate(pids):
            e, a, value = facts[pid]
            word = synonyms[a] if rng.random() < synonym_rate else attrs[a]
            tmpl = QUERY_TEMPLATES[rng.integers(len(QUERY_TEMPLATES))]
            qid = base + j
            queries[qid] = Query(qid, tmpl.format(a=word, e=entities[e]), (value,))
            qrels[qid] = {pid: 1}
        return queries, qrels

    train_q, train_r = make_queries(picked[:n_train], 0)
    eval_q, eval_r = make_queries(picked[n_train:], 100_000)
    bench = Benchmark(passages, train_q, train_r, eval_q, eval_r)
    if out_dir is not None:
        bench.write(out_dir)
    return bench
