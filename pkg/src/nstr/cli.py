"""Command-line interface.

Every subcommand reads its inputs from explicit paths, falling back to the
canonical file names inside ``--run-dir``, and writes its outputs into the
run directory. Existing outputs are never replaced unless ``--overwrite`` is
given. Failures print one ``nstr: error: <kind>: <message>`` line and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import lexical
from .benchmark import generate_benchmark
from .config import Config, dump_config, load_config
from .corpus import (
    Vocabulary,
    build_vocab,
    load_passages,
    load_qrels,
    load_queries,
    tokenize_collection,
    write_passages,
    write_qrels,
    write_queries,
)
from .errors import NstrError, ReferentialError
from .evaluation import (
    evaluate_run,
    load_run,
    robustness_sweep,
    write_metrics,
    write_run,
)
from .experiments import ROW_KEYS, benchmark_seed, directional_checks, summarize
from .index import (
    build_dense_index,
    load_pools,
    mine_hard_negatives,
    search_queries,
    write_pools,
)
from .model import (
    encode_batch,
    init_cross_params,
    load_checkpoint,
    load_cross_checkpoint,
    save_checkpoint,
    save_cross_checkpoint,
    save_embeddings,
)
from .pipeline import (
    Corpus,
    finetune,
    generate_soft_labels,
    load_soft_labels,
    prepare_corpus,
    prepare_queries,
    pretrain_student,
    rerank_run,
    reranker_soft_labels,
    run_self_training,
    synthetic_query_set,
    train_reranker,
    train_teacher_two_stage,
    write_soft_labels,
)
from .querygen import (
    SpanSampler,
    generate_synthetic,
    load_external_queries,
    load_synthetic,
    write_synthetic,
)
from .train import write_loss_log

log = logging.getLogger("nstr")


class ClobberError(NstrError):
    pass


class Context:
    def __init__(self, args: argparse.Namespace, config: Config):
        self.args = args
        self.config = config
        self.run_dir = Path(args.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def pc(self):
        return self.config.pipeline

    def inp(self, attr: str, default: str) -> Path:
        value = getattr(self.args, attr, None)
        return Path(value) if value else self.run_dir / default

    def out(self, name: str) -> Path:
        path = self.run_dir / name
        if path.exists() and not self.args.overwrite:
            raise ClobberError(f"{path} exists; pass --overwrite to replace it")
        return path

    def passages(self):
        return load_passages(self.inp("passages", "passages.tsv"))

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.inp("vocab", "vocab.tsv"))

    def corpus(self) -> Corpus:
        return prepare_corpus(self.passages(), None, self.pc, vocab=self.vocab())

    def queries(self, corpus: Corpus, prefix: str = ""):
        queries, qrels = load_queries(self.inp(f"{prefix}queries", f"{prefix}queries.tsv"),
                                      self.inp(f"{prefix}qrels", f"{prefix}qrels.tsv"))
        check_qrels(qrels, corpus.passages)
        return prepare_queries(queries, qrels, corpus, self.pc)

    def synthetic(self, corpus: Corpus):
        pairs = load_synthetic(self.inp("synthetic", "synthetic.tsv"), corpus.passages)
        return synthetic_query_set(pairs, corpus, self.pc)

    def encoder(self, attr="checkpoint", default="teacher_s2.ckpt", vocab_size=None):
        return load_checkpoint(self.inp(attr, default), self.pc.dim, vocab_size, self.pc.positional_scale)


def check_qrels(qrels, passages) -> None:
    for qid, judged in qrels.items():
        for pid in judged:
            if pid not in passages:
                raise ReferentialError(f"qrel ({qid}, {pid}) references an unknown passage")


# -- subcommands ----------------------------------------------------------------


def cmd_ingest(ctx: Context) -> None:
    """Validate and copy the collection, queries and qrels into the run dir."""
    a = ctx.args
    passages = load_passages(a.passages)
    outputs = {"passages": ctx.out("passages.tsv")}
    queries = {}
    for prefix in ("", "eval_"):
        qpath = getattr(a, f"{prefix}queries")
        if qpath:
            rpath = getattr(a, f"{prefix}qrels")
            q, r = load_queries(qpath, rpath)
            check_qrels(r, passages)
            queries[prefix] = (q, r, ctx.out(f"{prefix}queries.tsv"), ctx.out(f"{prefix}qrels.tsv") if rpath else None)
    summary = ctx.out("ingest.json")
    write_passages(passages, outputs["passages"])
    counts = {"passages": len(passages)}
    for prefix, (q, r, qout, rout) in queries.items():
        write_queries(q, qout)
        if rout is not None:
            write_qrels(r, rout)
        counts[f"{prefix}queries"] = len(q)
        counts[f"{prefix}qrels"] = sum(len(v) for v in r.values())
    summary.write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(counts, sort_keys=True))


def cmd_build_vocab(ctx: Context) -> None:
    """Build the vocabulary from passages and training queries."""
    out = ctx.out("vocab.tsv")
    qpath = ctx.inp("queries", "queries.tsv")
    queries = load_queries(qpath)[0] if qpath.exists() else None
    vocab = build_vocab(ctx.passages(), queries, ctx.pc.min_frequency)
    vocab.save(out)
    print(f"vocabulary: {len(vocab)} tokens")


def cmd_bm25_index(ctx: Context) -> None:
    """Build the BM25 inverted index."""
    out = ctx.out("bm25_index.json")
    index = lexical.build_inverted_index(ctx.passages(), ctx.vocab(), ctx.pc.max_passage_len)
    index.save(out)
    print(f"indexed {index.N} passages, {len(index.postings)} terms")


def cmd_bm25_search(ctx: Context) -> None:
    """BM25 retrieval for a query file, written as a TREC run."""
    out = ctx.out("bm25.run")
    index = lexical.InvertedIndex.load(ctx.inp("index", "bm25_index.json"))
    vocab = ctx.vocab()
    queries, _ = load_queries(ctx.inp("queries", "queries.tsv"))
    tokens = tokenize_collection(queries, vocab, ctx.pc.max_query_len)
    run = {qid: lexical.bm25_search(index, toks, ctx.args.k, ctx.pc.bm25_k1, ctx.pc.bm25_b)
           for qid, toks in tokens.items()}
    write_run(run, out, "bm25")


def cmd_train_teacher(ctx: Context) -> None:
    """Two-stage teacher training."""
    outs = [ctx.out(n) for n in ("teacher_s1.ckpt", "teacher_s2.ckpt", "teacher_s1_loss.csv", "teacher_s2_loss.csv")]
    corpus = ctx.corpus()
    gold = ctx.queries(corpus)
    s1, s2, info = train_teacher_two_stage(corpus, gold, ctx.pc)
    save_checkpoint(s1, outs[0])
    save_checkpoint(s2, outs[1])
    write_loss_log(info["loss_s1"], outs[2])
    write_loss_log(info["loss_s2"], outs[3])


def cmd_gen_queries(ctx: Context) -> None:
    """Span-sampled or external synthetic queries."""
    out = ctx.out("synthetic.tsv")
    passages = ctx.passages()
    if ctx.args.external:
        pairs = load_external_queries(ctx.args.external, passages)
    else:
        pairs = generate_synthetic(passages, SpanSampler(), ctx.pc.queries_per_passage, ctx.pc.seed)
    write_synthetic(pairs, out)
    print(f"{len(pairs)} synthetic queries")


def cmd_mine_negatives(ctx: Context) -> None:
    """Mine dense hard-negative pools with a checkpoint."""
    out = ctx.out(ctx.args.out)
    corpus = ctx.corpus()
    queries = ctx.synthetic(corpus) if ctx.args.synthetic_pairs else ctx.queries(corpus)
    params = ctx.encoder(vocab_size=len(corpus.vocab))
    index = build_dense_index(params, passage_tokens=corpus.passage_tokens)
    write_pools(mine_hard_negatives(index, params, queries.pairs, queries.tokens, ctx.pc.pool_size), out)


def cmd_soft_label(ctx: Context) -> None:
    """Teacher soft labels for synthetic queries."""
    out = ctx.out("soft_labels.jsonl")
    corpus = ctx.corpus()
    syn = ctx.synthetic(corpus)
    teacher = ctx.encoder(vocab_size=len(corpus.vocab))
    pools = load_pools(ctx.inp("pools", "synthetic_pools.tsv"))
    records = generate_soft_labels(teacher, syn.pairs, pools, ctx.pc.pretrain.n_hard_negatives, syn.tokens,
                                   corpus.passage_tokens, ctx.pc.soft_label_temperature)
    write_soft_labels(records, out)


def cmd_pretrain(ctx: Context) -> None:
    """Noisy student pre-training on soft labels."""
    out, loss = ctx.out("pretrain.ckpt"), ctx.out("pretrain_loss.csv")
    corpus = ctx.corpus()
    syn = ctx.synthetic(corpus)
    init = ctx.encoder(vocab_size=len(corpus.vocab))
    records = load_soft_labels(ctx.inp("soft_labels", "soft_labels.jsonl"))
    params, hist = pretrain_student(init, records, ctx.pc.effective_noise, ctx.pc.stage("pretrain"),
                                    syn.tokens, corpus.passage_tokens)
    save_checkpoint(params, out)
    write_loss_log(hist, loss)


def cmd_finetune(ctx: Context) -> None:
    """Finetune a checkpoint on gold pairs."""
    out, loss = ctx.out("finetune.ckpt"), ctx.out("finetune_loss.csv")
    corpus = ctx.corpus()
    gold = ctx.queries(corpus)
    init = ctx.encoder(default="pretrain.ckpt", vocab_size=len(corpus.vocab))
    pools = load_pools(ctx.inp("pools", "pools.tsv"))
    params, hist = finetune(init, gold.pairs, pools, ctx.pc.stage("finetune"), gold.tokens, corpus.passage_tokens)
    save_checkpoint(params, out)
    write_loss_log(hist, loss)


def cmd_self_train(ctx: Context) -> None:
    """Run the full self-training loop."""
    for name in ("manifest.json", "config.txt", "teacher_s1.ckpt"):
        ctx.out(name)
    passages = ctx.passages()
    queries, qrels = load_queries(ctx.inp("queries", "queries.tsv"), ctx.inp("qrels", "qrels.tsv"))
    check_qrels(qrels, passages)
    vpath = ctx.inp("vocab", "vocab.tsv")
    vocab = Vocabulary.load(vpath) if vpath.exists() else None
    corpus = prepare_corpus(passages, queries, ctx.pc, vocab=vocab)
    if vocab is None:
        corpus.vocab.save(ctx.out("vocab.tsv"))
    gold = prepare_queries(queries, qrels, corpus, ctx.pc)
    spath = ctx.inp("synthetic", "synthetic.tsv")
    if spath.exists():
        pairs = load_synthetic(spath, passages)
    else:
        pairs = generate_synthetic(passages, SpanSampler(), ctx.pc.queries_per_passage, ctx.pc.seed)
        write_synthetic(pairs, ctx.out("synthetic.tsv"))
    synthetic = synthetic_query_set(pairs, corpus, ctx.pc)
    evalset = None
    eq = ctx.inp("eval_queries", "eval_queries.tsv")
    if eq.exists():
        evalset = ctx.queries(corpus, "eval_")
    (ctx.run_dir / "config.txt").write_text(dump_config(ctx.config), encoding="utf-8")
    manifest = run_self_training(corpus, gold, synthetic, ctx.pc, run_dir=ctx.run_dir, evalset=evalset)
    for row in manifest.metrics:
        print(json.dumps(row, sort_keys=True))


def cmd_rerank_train(ctx: Context) -> None:
    """Train a teacher or student cross-encoder reranker."""
    out, loss = ctx.out("reranker.xckpt"), ctx.out("reranker_loss.csv")
    corpus = ctx.corpus()
    gold = ctx.queries(corpus)
    pools = load_pools(ctx.inp("pools", "pools.tsv"))
    query_tokens = dict(gold.tokens)
    soft = None
    if ctx.args.teacher_reranker:
        teacher = load_cross_checkpoint(ctx.args.teacher_reranker)
        syn = ctx.synthetic(corpus)
        query_tokens.update(syn.tokens)
        records = load_soft_labels(ctx.inp("soft_labels", "soft_labels.jsonl"))
        soft = reranker_soft_labels(teacher, records, query_tokens, corpus.passage_tokens,
                                    ctx.pc.soft_label_temperature)
        init = teacher
    else:
        init = init_cross_params(ctx.pc.seed, len(corpus.vocab), ctx.pc.dim, ctx.pc.hidden)
    params, hist = train_reranker(init, gold.pairs, pools, ctx.pc, query_tokens, corpus.passage_tokens, soft)
    save_cross_checkpoint(params, out)
    write_loss_log(hist, loss)


def cmd_rerank(ctx: Context) -> None:
    """Rerank a run with a cross-encoder."""
    out = ctx.out("reranked.run")
    corpus = ctx.corpus()
    queries, _ = load_queries(ctx.inp("queries", "eval_queries.tsv"))
    tokens = tokenize_collection(queries, corpus.vocab, ctx.pc.max_query_len)
    run = load_run(ctx.inp("run", "dense.run"))
    params = load_cross_checkpoint(ctx.inp("reranker", "reranker.xckpt"))
    missing = sorted(set(run) - set(tokens))
    if missing:
        raise ReferentialError(f"run references unknown query id {missing[0]}")
    write_run(rerank_run(params, run, tokens, corpus.passage_tokens, ctx.pc.rerank_depth), out, "rerank")


def cmd_eval(ctx: Context) -> None:
    """Compute metrics for a run or a checkpoint."""
    a, ec = ctx.args, ctx.config.eval
    outs = [ctx.out("metrics.csv"), ctx.out("per_query.csv")]
    qrels = load_qrels(ctx.inp("qrels", "eval_qrels.tsv"))
    queries = passages = None
    if a.checkpoint:
        corpus = ctx.corpus()
        queries, _ = load_queries(ctx.inp("queries", "eval_queries.tsv"))
        passages = corpus.passages
        qs = prepare_queries(queries, qrels, corpus, ctx.pc)
        params = load_checkpoint(a.checkpoint, ctx.pc.dim, len(corpus.vocab), ctx.pc.positional_scale)
        index = build_dense_index(params, passage_tokens=corpus.passage_tokens)
        run = search_queries(params, index, qs.tokens, ec.depth)
        write_run(run, ctx.out("dense.run"), "dense")
    else:
        run = load_run(ctx.inp("run", "dense.run"))
        if ec.answer_k:
            qpath = ctx.inp("queries", "eval_queries.tsv")
            ppath = ctx.inp("passages", "passages.tsv")
            if qpath.exists() and ppath.exists():
                queries, _ = load_queries(qpath)
                passages = load_passages(ppath)
    reports = evaluate_run(run, qrels, mrr_k=ec.mrr_k, recall_k=ec.recall_k, ndcg_k=ec.ndcg_k,
                           answer_k=ec.answer_k if queries is not None else (),
                           queries=queries, corpus=passages)
    write_metrics(reports, outs[0], outs[1])
    for r in reports:
        print(f"{r.name}@{r.k}\t{r.value:.6f}")


def cmd_robustness(ctx: Context) -> None:
    """MRR@10 under shuffled query tokens."""
    out = ctx.out("robustness.csv")
    corpus = ctx.corpus()
    evalset = ctx.queries(corpus, "eval_")
    params = ctx.encoder(default="iter1_finetune.ckpt", vocab_size=len(corpus.vocab))
    index = build_dense_index(params, passage_tokens=corpus.passage_tokens)
    table = robustness_sweep(params, evalset.tokens, index, evalset.qrels, ctx.config.eval.proportions, ctx.pc.seed)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("proportion,mrr@10\n")
        for p, m in table:
            fh.write(f"{p!r},{m:.9g}\n")
            print(f"{p}\t{m:.6f}")


def cmd_encode_corpus(ctx: Context) -> None:
    """Write passage embeddings."""
    out = ctx.out("embeddings.nste")
    corpus = ctx.corpus()
    params = ctx.encoder(vocab_size=len(corpus.vocab))
    ids = list(corpus.passage_tokens)
    save_embeddings(ids, encode_batch(params, [corpus.passage_tokens[i] for i in ids]), out)


def cmd_bench(ctx: Context) -> None:
    """Seeded desk-scale benchmark with directional checks."""
    bc = ctx.config.bench
    outs = [ctx.out("bench.csv"), ctx.out("bench_summary.json")]
    data_dir = ctx.run_dir / "data"
    generate_benchmark(ctx.pc.seed, bc.n_passages, bc.n_train, bc.n_eval, out_dir=data_dir)
    results = []
    for seed in range(ctx.pc.seed, ctx.pc.seed + bc.n_seeds):
        r = benchmark_seed(seed, ctx.pc, n_passages=bc.n_passages, n_train=bc.n_train, n_eval=bc.n_eval,
                           positional_scale=bc.positional_scale)
        log.info("seed %d: %s", seed, r.values)
        results.append(r)
    with open(outs[0], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("seed",) + ROW_KEYS)
        for r in results:
            writer.writerow([r.seed] + [f"{r.values[k]:.6g}" for k in ROW_KEYS])
    summary = summarize(results)
    checks = directional_checks(summary)
    outs[1].write_text(json.dumps({"medians": summary, "checks": checks}, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")


COMMANDS = {
    "ingest": cmd_ingest,
    "build-vocab": cmd_build_vocab,
    "bm25-index": cmd_bm25_index,
    "bm25-search": cmd_bm25_search,
    "train-teacher": cmd_train_teacher,
    "gen-queries": cmd_gen_queries,
    "mine-negatives": cmd_mine_negatives,
    "soft-label": cmd_soft_label,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "self-train": cmd_self_train,
    "rerank-train": cmd_rerank_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "bench": cmd_bench,
    "encode-corpus": cmd_encode_corpus,
}

_INPUTS = {
    "ingest": [("passages", True), ("queries", False), ("qrels", False), ("eval-queries", False),
               ("eval-qrels", False)],
    "build-vocab": ["passages", "queries"],
    "bm25-index": ["passages", "vocab"],
    "bm25-search": ["index", "vocab", "queries"],
    "train-teacher": ["passages", "vocab", "queries", "qrels"],
    "gen-queries": ["passages", "external"],
    "mine-negatives": ["passages", "vocab", "queries", "qrels", "synthetic", "checkpoint"],
    "soft-label": ["passages", "vocab", "synthetic", "checkpoint", "pools"],
    "pretrain": ["passages", "vocab", "synthetic", "checkpoint", "soft-labels"],
    "finetune": ["passages", "vocab", "queries", "qrels", "checkpoint", "pools"],
    "self-train": ["passages", "vocab", "queries", "qrels", "synthetic", "eval-queries", "eval-qrels"],
    "rerank-train": ["passages", "vocab", "queries", "qrels", "pools", "synthetic", "soft-labels",
                     "teacher-reranker"],
    "rerank": ["passages", "vocab", "queries", "run", "reranker"],
    "eval": ["run", "qrels", "queries", "passages", "vocab", "checkpoint"],
    "robustness": ["passages", "vocab", "eval-queries", "eval-qrels", "checkpoint"],
    "bench": [],
    "encode-corpus": ["passages", "vocab", "checkpoint"],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--run-dir", default=".", help="directory for inputs and artifacts (default: .)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nstr", description="Noisy self-training for dense retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, func in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=(func.__doc__ or name.replace("-", " ")).strip())
        for spec in _INPUTS[name]:
            flag, required = spec if isinstance(spec, tuple) else (spec, False)
            p.add_argument(f"--{flag}", required=required, metavar="PATH")
        if name == "bm25-search":
            p.add_argument("--k", type=int, default=100)
        if name == "mine-negatives":
            p.add_argument("--synthetic-pairs", action="store_true", help="mine for synthetic instead of gold pairs")
            p.add_argument("--out", default="pools.tsv", help="output file name inside the run dir")
    return parser


def _load_config(args) -> Config:
    config = load_config(args.config) if args.config else Config()
    return config.with_seed(args.seed) if args.seed is not None else config


def _threads() -> int | None:
    raw = os.environ.get("NSTR_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"NSTR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("NSTR_THREADS must be >= 0")
    return n or None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            COMMANDS[args.command](Context(args, _load_config(args)))
    except (NstrError, ValueError, KeyError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"nstr: error: {type(exc).__name__}: {' '.join(str(message).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
