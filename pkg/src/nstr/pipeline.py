"""Noisy self-training end to end.

Teacher preparation (BM25 negatives, then self-mined negatives), index
building and negative mining, soft labelling of synthetic queries, noisy
student pre-training, finetuning on gold pairs, and iteration with the
student as the next teacher. The cross-encoder reranker follows the same
teacher/student recipe.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import lexical
from .corpus import (
    MAX_PASSAGE_LEN,
    MAX_QUERY_LEN,
    Passage,
    Query,
    Vocabulary,
    build_vocab,
    gold_pairs,
    tokenize_collection,
)
from .errors import StageError
from .evaluation import evaluate_run
from .index import (
    DenseIndex,
    build_dense_index,
    exclude_gold,
    mine_hard_negatives,
    search_queries,
)
from .model import (
    CrossEncoderParams,
    EncoderParams,
    cross_score_batch,
    encode_batch,
    init_params,
    save_checkpoint,
    save_cross_checkpoint,
)
from .noise import NO_NOISE, NoiseConfig
from .querygen import SyntheticPair
from .rng import stream
from .train import (
    ContrastiveData,
    DistillationData,
    JointData,
    SoftLabel,
    TrainingConfig,
    softmax_scores,
    train_epochs,
    write_loss_log,
)

log = logging.getLogger(__name__)


STAGES = ("teacher_s1", "teacher_s2", "pretrain", "finetune",
          "reranker_teacher", "reranker_pretrain", "reranker_finetune")

_FLAT_KEYS = {
    "seed": "seed",
    "dim": "model.dim",
    "positional_scale": "model.positional_scale",
    "hidden": "model.hidden",
    "min_frequency": "corpus.min_frequency",
    "max_query_len": "corpus.max_query_len",
    "max_passage_len": "corpus.max_passage_len",
    "bm25_k1": "bm25.k1",
    "bm25_b": "bm25.b",
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    dim: int = 64
    positional_scale: float = 0.0
    hidden: int = 16
    min_frequency: int = 1
    max_query_len: int = MAX_QUERY_LEN
    max_passage_len: int = MAX_PASSAGE_LEN
    bm25_k1: float = lexical.K1
    bm25_b: float = lexical.B
    pool_size: int = 100
    iterations: int = 1
    soft_label_temperature: float = 1.0
    student_init: str = "teacher"
    teacher_s1: TrainingConfig = TrainingConfig(learning_rate=0.001, epochs=2, temperature=0.05)
    teacher_s2: TrainingConfig = TrainingConfig(learning_rate=0.001, epochs=1, temperature=0.05)
    pretrain: TrainingConfig = TrainingConfig(learning_rate=0.001, batch_size=32, epochs=4, temperature=0.05,
                                              use_in_batch_negatives=False)
    finetune: TrainingConfig = TrainingConfig(learning_rate=0.0003, epochs=1, temperature=0.05)
    reranker_teacher: TrainingConfig = TrainingConfig(learning_rate=0.01, batch_size=16, epochs=8,
                                                      n_hard_negatives=15, use_in_batch_negatives=False)
    reranker_pretrain: TrainingConfig = TrainingConfig(learning_rate=0.01, batch_size=32, epochs=2,
                                                       use_in_batch_negatives=False)
    reranker_finetune: TrainingConfig = TrainingConfig(learning_rate=0.01, batch_size=16, epochs=4,
                                                       n_hard_negatives=15, use_in_batch_negatives=False)
    rerank_depth: int = 50
    queries_per_passage: int = 1
    noise: NoiseConfig = NoiseConfig()
    no_noise: bool = False
    no_pseudo_labels: bool = False
    consistency_filter: bool = False
    joint_training: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.student_init not in ("teacher", "fresh"):
            raise ValueError("student_init must be 'teacher' or 'fresh'")
        if self.queries_per_passage < 1:
            raise ValueError("queries_per_passage must be >= 1")

    def stage(self, name: str) -> TrainingConfig:
        """Stage config with a seed derived from the global seed and the stage name."""
        cfg = getattr(self, name)
        derived = int(stream(self.seed, f"stage-{name}").integers(0, 2**31 - 1))
        return dataclasses.replace(cfg, seed=derived)

    @property
    def effective_noise(self) -> NoiseConfig:
        return NO_NOISE if self.no_noise else self.noise

    def snapshot(self) -> dict:
        """Flat ``namespace.key -> value`` view; :meth:`from_flat` inverts it."""
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in STAGES:
                for g in dataclasses.fields(value):
                    if g.name != "seed":
                        flat[f"train.{f.name}.{g.name}"] = getattr(value, g.name)
            elif f.name == "noise":
                for g in dataclasses.fields(value):
                    if g.name != "stream":
                        flat[f"noise.{g.name}"] = getattr(value, g.name)
            else:
                flat[_FLAT_KEYS.get(f.name, f"pipeline.{f.name}")] = value
        return dict(sorted(flat.items()))

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> PipelineConfig:
        base = cls()
        known = base.snapshot()
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        top, stages, noise = {}, {name: {} for name in STAGES}, {}
        inverse = {v: k for k, v in _FLAT_KEYS.items()}
        for key, value in flat.items():
            if key.startswith("train."):
                _, stage, name = key.split(".")
                stages[stage][name] = value
            elif key.startswith("noise."):
                noise[key[len("noise."):]] = value
            else:
                top[inverse.get(key, key.removeprefix("pipeline."))] = value
        for name, kw in stages.items():
            if kw:
                top[name] = dataclasses.replace(getattr(base, name), **kw)
        if noise:
            top["noise"] = dataclasses.replace(base.noise, **noise)
        return dataclasses.replace(base, **top)


@dataclass
class Corpus:
    passages: dict[int, Passage]
    vocab: Vocabulary
    passage_tokens: dict[int, np.ndarray]


@dataclass
class QuerySet:
    """Queries with their tokens and judgments; ``pairs`` are the
    ``(query id, positive id)`` training/evaluation pairs."""

    queries: dict[int, Query]
    tokens: dict[int, np.ndarray]
    qrels: dict
    pairs: list[tuple[int, int]]


def prepare_corpus(passages: Mapping[int, Passage], vocab_queries: Mapping[int, Query] | None,
                   config: PipelineConfig, vocab: Vocabulary | None = None) -> Corpus:
    vocab = vocab or build_vocab(passages, vocab_queries, config.min_frequency)
    return Corpus(dict(passages), vocab, tokenize_collection(passages, vocab, config.max_passage_len))


def prepare_queries(queries: Mapping[int, Query], qrels, corpus: Corpus, config: PipelineConfig) -> QuerySet:
    tokens = tokenize_collection(queries, corpus.vocab, config.max_query_len)
    return QuerySet(dict(queries), tokens, qrels, gold_pairs(qrels))


def synthetic_query_set(pairs: Sequence[SyntheticPair], corpus: Corpus, config: PipelineConfig) -> QuerySet:
    queries = {p.query.id: p.query for p in pairs}
    qrels = {p.query.id: {p.passage_id: 1} for p in pairs}
    tokens = tokenize_collection(queries, corpus.vocab, config.max_query_len)
    return QuerySet(queries, tokens, qrels, [(p.query.id, p.passage_id) for p in pairs])


# -- teacher preparation ----------------------------------------------------


def bm25_pools(corpus: Corpus, gold: QuerySet, config: PipelineConfig,
               index: lexical.InvertedIndex | None = None) -> dict[int, list[int]]:
    index = index or lexical.build_inverted_index(corpus.passages, corpus.vocab, config.max_passage_len)
    runs = {
        qid: lexical.bm25_search(index, gold.tokens[qid], config.pool_size + 1, config.bm25_k1, config.bm25_b)
        for qid in dict.fromkeys(q for q, _ in gold.pairs)
    }
    pools = exclude_gold(runs, gold.pairs, config.pool_size)
    for qid, pool in pools.items():
        if not pool:
            log.warning("query %s has an empty BM25 pool; training it with in-batch negatives only", qid)
    return pools


def train_teacher_two_stage(corpus: Corpus, gold: QuerySet, config: PipelineConfig,
                            bm25_index: lexical.InvertedIndex | None = None):
    """Return ``(stage-1 params, stage-2 params, info)``.

    Stage 1 learns from BM25 negatives; stage 2 continues from the stage-1
    checkpoint with negatives mined by the stage-1 model.
    """
    if not gold.pairs:
        raise ValueError("teacher training needs gold pairs")
    pools1 = bm25_pools(corpus, gold, config, bm25_index)
    s1 = init_params(config.seed, len(corpus.vocab), config.dim, config.positional_scale)
    data1 = ContrastiveData(gold.pairs, pools1, gold.tokens, corpus.passage_tokens, allow_short_pools=True)
    s1, hist1 = train_epochs(s1, data1, config.stage("teacher_s1"), "contrastive")

    index = build_dense_index(s1, passage_tokens=corpus.passage_tokens)
    pools2 = mine_hard_negatives(index, s1, gold.pairs, gold.tokens, config.pool_size)
    s2 = s1.copy()
    data2 = ContrastiveData(gold.pairs, pools2, gold.tokens, corpus.passage_tokens, allow_short_pools=True)
    s2, hist2 = train_epochs(s2, data2, config.stage("teacher_s2"), "contrastive")
    return s1, s2, {"bm25_pools": pools1, "stage2_pools": pools2, "loss_s1": hist1, "loss_s2": hist2}


# -- soft labels --------------------------------------------------------------


def generate_soft_labels(teacher: EncoderParams, pairs: Sequence[tuple[int, int]],
                         negative_pools: Mapping[int, Sequence[int]], n_negatives: int,
                         query_tokens: Mapping[int, np.ndarray], passage_tokens: Mapping[int, np.ndarray],
                         temperature: float = 1.0) -> list[SoftLabel]:
    """Teacher softmax over originating passage + first ``n_negatives`` pool entries."""
    cand_lists = []
    for qid, pid in pairs:
        pool = [p for p in negative_pools.get(qid, ()) if p != pid]
        if len(pool) < n_negatives:
            raise ValueError(f"query {qid}: negative pool has {len(pool)} entries, need {n_negatives}")
        cand_lists.append((qid, (pid,) + tuple(pool[:n_negatives])))
    if not cand_lists:
        return []
    q_vecs = encode_batch(teacher, [query_tokens[qid] for qid, _ in cand_lists])
    needed = list(dict.fromkeys(p for _, cands in cand_lists for p in cands))
    row = {pid: i for i, pid in enumerate(needed)}
    p_vecs = encode_batch(teacher, [passage_tokens[p] for p in needed])
    records = []
    for (qid, cands), q in zip(cand_lists, q_vecs):
        scores = p_vecs[[row[p] for p in cands]] @ q
        records.append(SoftLabel(qid, cands, softmax_scores(scores, temperature)))
    return records


def write_soft_labels(records: Sequence[SoftLabel], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            probs = [float(f"{p:.9g}") for p in r.probs]
            fh.write(json.dumps({"qid": int(r.query_id), "candidates": [int(c) for c in r.candidates],
                                 "probs": probs}) + "\n")


def load_soft_labels(path) -> list[SoftLabel]:
    """Read JSONL soft labels, renormalising away serialisation rounding."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            cands, probs = tuple(obj["candidates"]), np.asarray(obj["probs"], dtype=np.float64)
            if len(cands) != len(probs) or len(set(cands)) != len(cands):
                raise ValueError(f"{path}:{line_no}: malformed soft-label record")
            records.append(SoftLabel(obj["qid"], cands, probs / probs.sum()))
    return records


def consistency_filter(teacher: EncoderParams, pairs: Sequence[tuple[int, int]], index: DenseIndex,
                       query_tokens: Mapping[int, np.ndarray]) -> list[tuple[int, int]]:
    """Keep pairs whose originating passage is the teacher's top-1 hit."""
    if not pairs:
        return []
    top1 = search_queries(teacher, index, {qid: query_tokens[qid] for qid, _ in pairs}, 1)
    return [(qid, pid) for qid, pid in pairs if top1[qid] and top1[qid][0][0] == pid]


# -- student stages -------------------------------------------------------------


def pretrain_student(init: EncoderParams, soft_labels: Sequence[SoftLabel], noise: NoiseConfig,
                     train_config: TrainingConfig, query_tokens, passage_tokens):
    if not soft_labels:
        raise ValueError("no soft labels to pre-train on")
    data = DistillationData(list(soft_labels), query_tokens, passage_tokens)
    return train_epochs(init.copy(), data, train_config, "kl", noise)


def pretrain_contrastive(init, pairs, pools, noise, train_config, query_tokens, passage_tokens):
    """Pre-training on synthetic pairs with hard labels (the no-pseudo-label ablation)."""
    data = ContrastiveData(list(pairs), pools, query_tokens, passage_tokens)
    return train_epochs(init.copy(), data, train_config, "contrastive", noise)


def finetune(params, pairs, pools, train_config: TrainingConfig, query_tokens, passage_tokens):
    data = ContrastiveData(list(pairs), pools, query_tokens, passage_tokens)
    if train_config.epochs == 0:
        return params.copy(), []
    return train_epochs(params.copy(), data, train_config, "contrastive")


# -- full run ----------------------------------------------------------------


@dataclass
class RunManifest:
    run_dir: str
    seed: int
    config: dict
    checkpoints: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    soft_label_files: dict[str, str] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    params: dict = field(default_factory=dict, repr=False)
    soft_labels: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        payload = {
            "run_dir": self.run_dir,
            "seed": self.seed,
            "config": self.config,
            "stages": self.stages,
            "checkpoints": self.checkpoints,
            "checksums": self.checksums,
            "soft_label_files": self.soft_label_files,
            "metrics": self.metrics,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def dense_run(params: EncoderParams, corpus: Corpus, queries: QuerySet, depth: int, index=None):
    index = index or build_dense_index(params, passage_tokens=corpus.passage_tokens)
    return search_queries(params, index, queries.tokens, depth)


def metric_row(label: str, params: EncoderParams, corpus: Corpus, evalset: QuerySet, iteration: int,
               index=None) -> dict:
    run = dense_run(params, corpus, evalset, 100, index)
    reports = evaluate_run(run, evalset.qrels, mrr_k=(10,), recall_k=(50, 100))
    row = {"stage": label, "iteration": iteration}
    row.update({f"{r.name}@{r.k}": round(r.value, 9) for r in reports})
    return row


class _Recorder:
    """Collects checkpoints and loss logs, writing them when a run dir is set."""

    def __init__(self, manifest: RunManifest, run_dir: Path | None):
        self.manifest = manifest
        self.run_dir = run_dir

    def checkpoint(self, stage: str, params, history=None):
        self.manifest.stages.append(stage)
        self.manifest.params[stage] = params
        self.manifest.checksums[stage] = params.checksum()
        if self.run_dir is None:
            return
        if isinstance(params, CrossEncoderParams):
            name = f"{stage}.xckpt"
            save_cross_checkpoint(params, self.run_dir / name)
        else:
            name = f"{stage}.ckpt"
            save_checkpoint(params, self.run_dir / name)
        self.manifest.checkpoints[stage] = name
        if history is not None:
            write_loss_log(history, self.run_dir / f"{stage}_loss.csv")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_self_training(corpus: Corpus, gold: QuerySet, synthetic: QuerySet, config: PipelineConfig,
                      run_dir=None, evalset: QuerySet | None = None, teacher: EncoderParams | None = None
                      ) -> RunManifest:
    """Execute the whole algorithm and return the manifest.

    ``teacher`` skips teacher preparation (used by ablation sweeps that share
    one teacher). With ``run_dir`` set, checkpoints, soft labels, loss logs
    and ``manifest.json`` are written there.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(".", config.seed, config.snapshot())
    rec = _Recorder(manifest, run_dir)

    if teacher is None:
        s1, teacher, info = _stage("train-teacher", train_teacher_two_stage, corpus, gold, config)
        rec.checkpoint("teacher_s1", s1, info["loss_s1"])
        rec.checkpoint("teacher_s2", teacher, info["loss_s2"])
    else:
        rec.checkpoint("teacher_s2", teacher)
    if evalset is not None:
        manifest.metrics.append(metric_row("teacher", teacher, corpus, evalset, 0))

    noise = config.effective_noise
    for it in range(1, config.iterations + 1):
        index = _stage(f"iter{it}-index", build_dense_index, teacher, passage_tokens=corpus.passage_tokens)
        gold_pools = _stage(f"iter{it}-mine-gold", mine_hard_negatives, index, teacher, gold.pairs,
                            gold.tokens, config.pool_size)
        syn_pairs = list(synthetic.pairs)
        if config.consistency_filter:
            syn_pairs = _stage(f"iter{it}-filter", consistency_filter, teacher, syn_pairs, index, synthetic.tokens)
            log.info("consistency filter kept %d of %d synthetic pairs", len(syn_pairs), len(synthetic.pairs))
        syn_pools = _stage(f"iter{it}-mine-synthetic", mine_hard_negatives, index, teacher, syn_pairs,
                           synthetic.tokens, config.pool_size)

        query_tokens = {**gold.tokens, **synthetic.tokens}
        student = teacher if config.student_init == "teacher" else init_params(
            int(stream(config.seed, f"student-init-{it}").integers(0, 2**31 - 1)),
            len(corpus.vocab), config.dim, config.positional_scale)
        pre_cfg, ft_cfg = config.stage("pretrain"), config.stage("finetune")

        soft = None
        if not config.no_pseudo_labels:
            soft = _stage(f"iter{it}-soft-label", generate_soft_labels, teacher, syn_pairs, syn_pools,
                          pre_cfg.n_hard_negatives, synthetic.tokens, corpus.passage_tokens,
                          config.soft_label_temperature)
            manifest.soft_labels[it] = soft
            if run_dir is not None:
                write_soft_labels(soft, run_dir / f"iter{it}_soft_labels.jsonl")
                manifest.soft_label_files[str(it)] = f"iter{it}_soft_labels.jsonl"

        if config.joint_training:
            if soft is None:
                raise StageError(f"iter{it}-joint", "joint training requires pseudo labels")
            data = JointData(
                ContrastiveData(gold.pairs, gold_pools, query_tokens, corpus.passage_tokens),
                DistillationData(soft, query_tokens, corpus.passage_tokens),
                labelled_epochs=ft_cfg.epochs,
            )
            joint_cfg = dataclasses.replace(ft_cfg, epochs=pre_cfg.epochs, batch_size=pre_cfg.batch_size,
                                            learning_rate=pre_cfg.learning_rate)
            student, hist = _stage(f"iter{it}-joint", train_epochs, student.copy(), data, joint_cfg, "joint", noise)
            rec.checkpoint(f"iter{it}_joint", student, hist)
        else:
            if soft is not None:
                student, hist = _stage(f"iter{it}-pretrain", pretrain_student, student, soft, noise, pre_cfg,
                                       query_tokens, corpus.passage_tokens)
            else:
                student, hist = _stage(f"iter{it}-pretrain", pretrain_contrastive, student, syn_pairs, syn_pools,
                                       noise, pre_cfg, query_tokens, corpus.passage_tokens)
            rec.checkpoint(f"iter{it}_pretrain", student, hist)
            student, hist = _stage(f"iter{it}-finetune", finetune, student, gold.pairs, gold_pools, ft_cfg,
                                   query_tokens, corpus.passage_tokens)
            rec.checkpoint(f"iter{it}_finetune", student, hist)

        if evalset is not None:
            manifest.metrics.append(metric_row("student", student, corpus, evalset, it))
        teacher = student

    if run_dir is not None:
        (run_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


# -- reranker ------------------------------------------------------------------


def reranker_soft_labels(teacher: CrossEncoderParams, records: Sequence[SoftLabel], query_tokens,
                         passage_tokens, temperature: float = 1.0) -> list[SoftLabel]:
    """Teacher-reranker distributions over the retriever soft-label candidate sets."""
    out = []
    for r in records:
        q = query_tokens[r.query_id]
        scores = cross_score_batch(teacher, [q] * len(r.candidates), [passage_tokens[p] for p in r.candidates])
        out.append(SoftLabel(r.query_id, r.candidates, softmax_scores(scores, temperature)))
    return out


def train_reranker(cross_params: CrossEncoderParams, pairs, negative_pools, config: PipelineConfig,
                   query_tokens, passage_tokens, soft_labels: Sequence[SoftLabel] | None = None):
    """Teacher mode (no soft labels): contrastive training on gold pairs.

    Student mode: noisy KL pre-training against the teacher reranker's soft
    labels followed by contrastive finetuning on the gold pairs.
    """
    params = cross_params.copy()
    history = []
    if soft_labels is None:
        data = ContrastiveData(list(pairs), negative_pools, query_tokens, passage_tokens)
        params, h = train_epochs(params, data, config.stage("reranker_teacher"), "contrastive")
        return params, h
    data = DistillationData(list(soft_labels), query_tokens, passage_tokens)
    params, h = train_epochs(params, data, config.stage("reranker_pretrain"), "kl", config.effective_noise)
    history += h
    ft = config.stage("reranker_finetune")
    if ft.epochs:
        data = ContrastiveData(list(pairs), negative_pools, query_tokens, passage_tokens)
        params, h = train_epochs(params, data, ft, "contrastive")
        history += h
    return params, history


def rerank(cross_params: CrossEncoderParams, query_tokens, candidate_ids: Sequence[int],
           passage_tokens: Mapping[int, np.ndarray]) -> list[tuple[int, float]]:
    """Reorder candidates by cross-encoder score, ties by ascending id."""
    if not candidate_ids:
        raise ValueError("no candidates to rerank")
    for pid in candidate_ids:
        if pid not in passage_tokens:
            raise KeyError(f"unknown candidate passage {pid}")
    scores = cross_score_batch(cross_params, [query_tokens] * len(candidate_ids),
                               [passage_tokens[p] for p in candidate_ids])
    return sorted(zip((int(p) for p in candidate_ids), scores.tolist()), key=lambda x: (-x[1], x[0]))


def rerank_run(cross_params, run, query_tokens, passage_tokens, depth: int):
    return {
        qid: rerank(cross_params, query_tokens[qid], [pid for pid, _ in ranked[:depth]], passage_tokens)
        for qid, ranked in run.items()
    }
