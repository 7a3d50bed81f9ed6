"""Listwise losses with analytic gradients, batch assembly and the optimizer.

Both models share one listwise head: candidate scores are divided by a
temperature and normalised with a softmax. The contrastive loss is the
negative log-likelihood of the candidate in slot 0 (the positive); the
distillation loss is ``KL(teacher || student)`` against a fixed target
distribution. Gradients are propagated by hand through the pooling layer
into the rows of the embedding table.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (
    CrossEncoderParams,
    EncoderParams,
    cross_backward,
    cross_forward,
    pooling_matrix,
)
from .noise import NoiseConfig, apply_noise
from .rng import stream

log = logging.getLogger(__name__)

LOSS_KINDS = ("contrastive", "kl", "joint")


@dataclass(frozen=True)
class CandidateSet:
    query_id: int
    positive_id: int
    negative_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "negative_ids", tuple(int(x) for x in self.negative_ids))
        if self.positive_id in self.negative_ids:
            raise ValueError(f"query {self.query_id}: positive {self.positive_id} listed as a negative")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise ValueError(f"query {self.query_id}: duplicate negatives")

    @property
    def ids(self) -> tuple[int, ...]:
        return (self.positive_id,) + self.negative_ids

    def __len__(self):
        return 1 + len(self.negative_ids)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    n_hard_negatives: int = 7
    epochs: int = 1
    optimizer: str = "adam"
    seed: int = 0
    temperature: float = 1.0
    use_in_batch_negatives: bool = True
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_hard_negatives < 0:
            raise ValueError("n_hard_negatives must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RowGrad:
    """Gradient restricted to the embedding rows a batch touched."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        out[self.rows] = self.values
        return out

    def __add__(self, other: "RowGrad") -> "RowGrad":
        rows = np.union1d(self.rows, other.rows)
        values = np.zeros((len(rows), self.values.shape[1]))
        values[np.searchsorted(rows, self.rows)] += self.values
        values[np.searchsorted(rows, other.rows)] += other.values
        return RowGrad(rows, values)


# name -> ndarray, or RowGrad for the embedding table
Gradients = dict


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    out = dict(a)
    for name, g in b.items():
        out[name] = out[name] + g if name in out else g
    return out


# -- softmax head ----------------------------------------------------------


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    top = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_scores(scores, temperature: float = 1.0) -> np.ndarray:
    """``exp(s_i / t) / sum_j exp(s_j / t)`` with max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("softmax over an empty score vector")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if np.isnan(scores).any():
        raise ValueError("NaN in scores")
    return np.exp(log_softmax(scores / temperature))


def kl_divergence(teacher, student) -> float:
    teacher, student = np.asarray(teacher, float), np.asarray(student, float)
    nz = teacher > 0
    return float(np.sum(teacher[nz] * (np.log(teacher[nz]) - np.log(student[nz]))))


def _listwise(scores, mask, targets, temperature):
    """Per-row losses and d(loss_row)/d(scores).

    ``targets`` is None for the contrastive loss (slot 0 is the positive),
    otherwise a row-stochastic matrix that is zero on padded slots.
    """
    logits = np.where(mask, scores / temperature, -np.inf)
    logp = log_softmax(logits)
    probs = np.where(mask, np.exp(logp), 0.0)
    if targets is None:
        losses = -logp[:, 0]
        dlogits = probs.copy()
        dlogits[:, 0] -= 1.0
    else:
        safe_t = np.where(targets > 0, targets, 1.0)
        safe_logp = np.where(mask, logp, 0.0)
        losses = np.sum(np.where(targets > 0, targets * (np.log(safe_t) - safe_logp), 0.0), axis=1)
        dlogits = probs * targets.sum(axis=1, keepdims=True) - targets
    return losses, dlogits / temperature


# -- batch representation ---------------------------------------------------


@dataclass
class Example:
    """One query with its ordered candidates (positive first).

    ``target`` holds fixed teacher probabilities for the distillation loss
    and is None for the contrastive loss.
    """

    query_id: int
    query_tokens: np.ndarray
    candidates: CandidateSet
    target: np.ndarray | None = None


def _prepare(examples, passage_tokens, noise, rng):
    """Token sequences for queries and candidate slots plus a padded index.

    Without noise each passage is encoded once per batch; with noise every
    slot gets its own independently perturbed copy.
    """
    if not examples:
        raise ValueError("empty batch")
    q_seqs, p_seqs, slot_of = [], [], {}
    width = max(len(ex.candidates) for ex in examples)
    cand_idx = np.zeros((len(examples), width), dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    targets = None
    if examples[0].target is not None:
        targets = np.zeros((len(examples), width))
    for b, ex in enumerate(examples):
        if ex.candidates.positive_id is None:
            raise ValueError(f"query {ex.query_id}: candidate set has no positive")
        q = ex.query_tokens
        if noise is not None and not noise.is_identity:
            q = apply_noise(q, noise, rng)
        q_seqs.append(q)
        for m, pid in enumerate(ex.candidates.ids):
            if pid not in passage_tokens:
                raise KeyError(f"query {ex.query_id}: unknown candidate passage {pid}")
            if noise is not None and not noise.is_identity:
                cand_idx[b, m] = len(p_seqs)
                p_seqs.append(apply_noise(passage_tokens[pid], noise, rng))
            else:
                if pid not in slot_of:
                    slot_of[pid] = len(p_seqs)
                    p_seqs.append(passage_tokens[pid])
                cand_idx[b, m] = slot_of[pid]
            mask[b, m] = True
        if targets is not None:
            if ex.target is None:
                raise ValueError(f"query {ex.query_id}: missing teacher distribution")
            t = np.asarray(ex.target, dtype=np.float64)
            if len(t) != len(ex.candidates):
                raise ValueError(
                    f"query {ex.query_id}: teacher distribution has {len(t)} entries "
                    f"for {len(ex.candidates)} candidates"
                )
            targets[b, : len(t)] = t
    return q_seqs, p_seqs, cand_idx, mask, targets


def _row_grad(pools_and_grads) -> RowGrad:
    """Scatter ``pool.T @ grad`` into the embedding rows the pools touch."""
    cols = np.concatenate([pool.indices for pool, _ in pools_and_grads])
    contrib = np.concatenate([
        pool.data[:, None] * grad[np.repeat(np.arange(pool.shape[0]), np.diff(pool.indptr))]
        for pool, grad in pools_and_grads
    ])
    rows, inverse = np.unique(cols, return_inverse=True)
    values = np.zeros((len(rows), contrib.shape[1]))
    np.add.at(values, inverse, contrib)
    return RowGrad(rows, values)


def dual_batch_loss(params: EncoderParams, examples: Sequence[Example], passage_tokens,
                    temperature=1.0, noise: NoiseConfig | None = None, rng=None):
    """Mean listwise loss of a dual-encoder batch and its gradient."""
    q_seqs, p_seqs, cand_idx, mask, targets = _prepare(examples, passage_tokens, noise, rng)
    table = params.embedding.astype(np.float64, copy=False)
    pq = pooling_matrix(q_seqs, params.vocab_size, params.positional_scale)
    pp = pooling_matrix(p_seqs, params.vocab_size, params.positional_scale)
    eq = np.asarray(pq @ table)
    ep = np.asarray(pp @ table)
    cand = ep[cand_idx]
    scores = np.einsum("bd,bmd->bm", eq, cand)
    losses, dscores = _listwise(scores, mask, targets, temperature)
    dscores = np.where(mask, dscores, 0.0) / len(examples)
    d_eq = np.einsum("bm,bmd->bd", dscores, cand)
    d_ep = np.zeros_like(ep)
    np.add.at(d_ep, cand_idx[mask], (dscores[:, :, None] * eq[:, None, :])[mask])
    grad = {"embedding": _row_grad([(pq, d_eq), (pp, d_ep)])}
    return float(losses.mean()), grad


def cross_batch_loss(params: CrossEncoderParams, examples: Sequence[Example], passage_tokens,
                     temperature=1.0, noise: NoiseConfig | None = None, rng=None):
    """Mean listwise loss over cross-encoder logits and its gradient."""
    q_seqs, p_seqs, cand_idx, mask, targets = _prepare(examples, passage_tokens, noise, rng)
    table = params.embedding.astype(np.float64, copy=False)
    pq = pooling_matrix(q_seqs, params.vocab_size)
    pp = pooling_matrix(p_seqs, params.vocab_size)
    eq = np.asarray(pq @ table)
    ep = np.asarray(pp @ table)
    b_idx, m_idx = np.nonzero(mask)
    flat_scores, cache = cross_forward(params, eq[b_idx], ep[cand_idx[b_idx, m_idx]])
    scores = np.zeros(mask.shape)
    scores[b_idx, m_idx] = flat_scores
    losses, dscores = _listwise(scores, mask, targets, temperature)
    dflat = dscores[b_idx, m_idx] / len(examples)
    head, d_u, d_v = cross_backward(params, cache, dflat)
    d_eq = np.zeros_like(eq)
    np.add.at(d_eq, b_idx, d_u)
    d_ep = np.zeros_like(ep)
    np.add.at(d_ep, cand_idx[b_idx, m_idx], d_v)
    grads = {"embedding": _row_grad([(pq, d_eq), (pp, d_ep)])}
    grads.update(head)
    return float(losses.mean()), grads


def batch_loss(params, examples, passage_tokens, temperature=1.0, noise=None, rng=None):
    if isinstance(params, CrossEncoderParams):
        return cross_batch_loss(params, examples, passage_tokens, temperature, noise, rng)
    return dual_batch_loss(params, examples, passage_tokens, temperature, noise, rng)


def contrastive_loss_and_grad(params, query_tokens, candidates: CandidateSet,
                              passage_tokens: Mapping[int, np.ndarray], *, temperature=1.0,
                              noise: NoiseConfig | None = None, rng=None):
    """``-log softmax(scores)[positive]`` for a single query."""
    ex = Example(candidates.query_id, np.asarray(query_tokens), candidates)
    return batch_loss(params, [ex], passage_tokens, temperature, noise, rng)


def kl_loss_and_grad(student_params, teacher_dist, query_tokens, candidates: CandidateSet,
                     passage_tokens: Mapping[int, np.ndarray], *, temperature=1.0,
                     noise: NoiseConfig | None = None, rng=None):
    """``KL(teacher || student)`` over one candidate set.

    The teacher distribution is a constant; noise, when given, perturbs only
    the student's query and candidate tokens.
    """
    teacher_dist = np.asarray(teacher_dist, dtype=np.float64)
    if len(teacher_dist) != len(candidates):
        raise ValueError(
            f"teacher distribution has {len(teacher_dist)} entries for {len(candidates)} candidates"
        )
    ex = Example(candidates.query_id, np.asarray(query_tokens), candidates, teacher_dist)
    return batch_loss(student_params, [ex], passage_tokens, temperature, noise, rng)


def joint_loss(params, labelled: Sequence[Example], synthetic: Sequence[Example], passage_tokens, *,
               temperature=1.0, noise: NoiseConfig | None = None, rng=None):
    """Mean contrastive loss on gold examples plus mean KL on synthetic ones."""
    if not labelled or not synthetic:
        raise ValueError("joint loss needs non-empty labelled and synthetic batches")
    cl, g_cl = batch_loss(params, labelled, passage_tokens, temperature)
    st, g_st = batch_loss(params, synthetic, passage_tokens, temperature, noise, rng)
    return cl + st, add_gradients(g_cl, g_st)


# -- batch assembly ---------------------------------------------------------


def assemble_batch(pairs: Sequence[tuple[int, int]], negative_pools: Mapping[int, Sequence[int]],
                   config: TrainingConfig, rng: np.random.Generator,
                   allow_short_pools: bool = False) -> list[CandidateSet]:
    """Positive + sampled hard negatives (+ in-batch positives) per query.

    With ``allow_short_pools`` a query whose pool is smaller than
    ``n_hard_negatives`` keeps every pool entry instead of failing.
    """
    n = config.n_hard_negatives
    batch = []
    for qid, pos in pairs:
        pool = [p for p in negative_pools.get(qid, ()) if p != pos]
        if len(pool) < n and not allow_short_pools:
            raise ValueError(f"query {qid}: negative pool has {len(pool)} entries, need {n}")
        take = min(n, len(pool))
        picked = [pool[i] for i in rng.choice(len(pool), size=take, replace=False)] if take else []
        negs = list(dict.fromkeys(picked))
        if config.use_in_batch_negatives:
            seen = set(negs) | {pos}
            for _, other in pairs:
                if other not in seen:
                    negs.append(other)
                    seen.add(other)
        batch.append(CandidateSet(qid, pos, tuple(negs)))
    return batch


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def _dense(grad, shape):
    return grad.to_dense(shape) if isinstance(grad, RowGrad) else np.asarray(grad, dtype=np.float64)


def optimizer_step(params, grads: Gradients, config: TrainingConfig, state: OptimizerState | None = None):
    """Apply one SGD or bias-corrected Adam update in place and return params."""
    arrays = params.arrays()
    dense = {name: _dense(g, arrays[name].shape) for name, g in grads.items()}
    for name, g in dense.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    if config.clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in dense.values()))
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
            dense = {k: g * scale for k, g in dense.items()}
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for name, g in dense.items():
            arr = arrays[name]
            arr[...] = (arr - lr * g).astype(arr.dtype)
        return params
    if state is None:
        state = OptimizerState()
    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    for name, g in dense.items():
        m = state.m.setdefault(name, np.zeros(g.shape))
        v = state.v.setdefault(name, np.zeros(g.shape))
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        arr = arrays[name]
        arr[...] = (arr - lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(arr.dtype)
    return params


# -- epoch loops ------------------------------------------------------------


@dataclass
class ContrastiveData:
    pairs: list[tuple[int, int]]
    negative_pools: Mapping[int, Sequence[int]]
    query_tokens: Mapping[int, np.ndarray]
    passage_tokens: Mapping[int, np.ndarray]
    allow_short_pools: bool = False


@dataclass
class SoftLabel:
    query_id: int
    candidates: tuple[int, ...]
    probs: np.ndarray

    def candidate_set(self) -> CandidateSet:
        return CandidateSet(self.query_id, self.candidates[0], tuple(self.candidates[1:]))


@dataclass
class DistillationData:
    records: list[SoftLabel]
    query_tokens: Mapping[int, np.ndarray]
    passage_tokens: Mapping[int, np.ndarray]


@dataclass
class JointData:
    labelled: ContrastiveData
    synthetic: DistillationData
    labelled_epochs: int = 1


def _contrastive_examples(data: ContrastiveData, pairs, config, rng):
    sets = assemble_batch(pairs, data.negative_pools, config, rng, data.allow_short_pools)
    return [Example(c.query_id, data.query_tokens[c.query_id], c) for c in sets]


def _kl_examples(data: DistillationData, records):
    return [Example(r.query_id, data.query_tokens[r.query_id], r.candidate_set(), r.probs) for r in records]


def train_epochs(params, data, config: TrainingConfig, loss_kind: str = "contrastive",
                 noise: NoiseConfig | None = None, state: OptimizerState | None = None):
    """Run ``config.epochs`` passes and return ``(params, [(epoch, mean loss)])``.

    ``params`` is updated in place; the returned object is the last
    checkpoint. ``noise`` perturbs the student's query and candidate tokens.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "joint":
        return _train_joint(params, data, config, noise, state)
    size = len(data.pairs) if loss_kind == "contrastive" else len(data.records)
    if size == 0:
        raise ValueError("no training data")
    state = state or OptimizerState()
    neg_rng = stream(config.seed, "negatives")
    noise_rng = stream(config.seed, noise.stream if noise else "noise")
    history = []
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, f"shuffle-epoch-{epoch}").permutation(size)
        total, count = 0.0, 0
        for start in range(0, size, config.batch_size):
            chunk = order[start : start + config.batch_size]
            if loss_kind == "contrastive":
                examples = _contrastive_examples(data, [data.pairs[i] for i in chunk], config, neg_rng)
                loss, grads = batch_loss(params, examples, data.passage_tokens, config.temperature,
                                         noise, noise_rng)
            else:
                examples = _kl_examples(data, [data.records[i] for i in chunk])
                loss, grads = batch_loss(params, examples, data.passage_tokens, config.temperature,
                                         noise, noise_rng)
            optimizer_step(params, grads, config, state)
            total += loss * len(chunk)
            count += len(chunk)
        history.append((epoch, total / count))
        log.debug("epoch %d loss %.6f", epoch, total / count)
    return params, history


def _cycle(size, seed, prefix):
    epoch = 0
    while True:
        epoch += 1
        yield from stream(seed, f"{prefix}-{epoch}").permutation(size).tolist()


def _train_joint(params, data: JointData, config: TrainingConfig, noise, state):
    """Joint loss steps with the synthetic set driving the epoch count.

    The labelled batch size is chosen so the gold pairs are seen
    ``labelled_epochs`` times over the run, keeping the two data sources on
    the same number of update steps.
    """
    n_syn, n_lab = len(data.synthetic.records), len(data.labelled.pairs)
    if n_syn == 0 or n_lab == 0:
        raise ValueError("joint training needs labelled and synthetic data")
    state = state or OptimizerState()
    steps_per_epoch = math.ceil(n_syn / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    lab_batch = max(1, math.ceil(data.labelled_epochs * n_lab / max(total_steps, 1)))
    neg_rng = stream(config.seed, "negatives")
    noise_rng = stream(config.seed, noise.stream if noise else "noise")
    lab_order = _cycle(n_lab, config.seed, "shuffle-labelled")
    history = []
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, f"shuffle-epoch-{epoch}").permutation(n_syn)
        total = 0.0
        for start in range(0, n_syn, config.batch_size):
            chunk = order[start : start + config.batch_size]
            syn = _kl_examples(data.synthetic, [data.synthetic.records[i] for i in chunk])
            lab_pairs = [data.labelled.pairs[next(lab_order)] for _ in range(lab_batch)]
            lab = _contrastive_examples(data.labelled, lab_pairs, config, neg_rng)
            loss, grads = joint_loss(params, lab, syn, data.synthetic.passage_tokens,
                                     temperature=config.temperature, noise=noise, rng=noise_rng)
            optimizer_step(params, grads, config, state)
            total += loss
        history.append((epoch, total / steps_per_epoch))
    return params, history


def write_loss_log(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in history:
            fh.write(f"{epoch},{loss:.9g}\n")
