"""Scoring models: a tied-weight embedding-bag dual encoder and a small
cross-encoder, plus their binary checkpoint formats.

Parameters are stored as float32; pooled embeddings and scores are computed
in float64. Tests that need exact finite differences build float64 params.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import PAD
from .errors import CheckpointError, EmptyInputError
from .rng import stream

ENCODER_MAGIC = b"NSTR"
EMBEDDINGS_MAGIC = b"NSTE"
CROSS_MAGIC = b"NSTX"
VERSION = 1


@dataclass
class EncoderParams:
    """One embedding table shared by the query and passage encoders.

    ``positional_scale`` > 0 turns on order-sensitive pooling where position
    ``i`` of an ``n``-token input is weighted ``1 + positional_scale * i / n``.
    It is configuration, not a trained parameter, and is not checkpointed.
    """

    embedding: np.ndarray
    positional_scale: float = 0.0

    def __post_init__(self):
        if self.embedding.ndim != 2 or self.embedding.shape[1] < 1:
            raise ValueError("embedding must be a (vocab_size, d) matrix with d >= 1")

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embedding.copy(), self.positional_scale)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.embedding).tobytes()).hexdigest()


def init_params(seed: int, vocab_size: int, d: int, positional_scale: float = 0.0) -> EncoderParams:
    if d < 1:
        raise ValueError("d must be >= 1")
    bound = 1.0 / np.sqrt(d)
    emb = stream(seed, "init").uniform(-bound, bound, size=(vocab_size, d)).astype(np.float32)
    emb = np.clip(emb, -np.float32(bound), np.float32(bound))
    emb[PAD] = 0.0
    return EncoderParams(emb, positional_scale)


def pooling_matrix(seqs: Sequence[np.ndarray], vocab_size: int, positional_scale: float = 0.0):
    """Sparse ``(len(seqs), vocab_size)`` matrix whose product with the
    embedding table yields the pooled vectors. Repeated tokens stay as
    separate entries, which the product sums."""
    cols, vals, indptr = [], [], [0]
    for seq in seqs:
        seq = np.asarray(seq, dtype=np.int64)
        keep = seq != PAD
        if not keep.any():
            raise EmptyInputError("cannot encode an empty or all-PAD sequence")
        n = len(seq)
        w = np.ones(n) if positional_scale == 0 else 1.0 + positional_scale * np.arange(n) / n
        w = w[keep]
        cols.append(seq[keep])
        vals.append(w / w.sum())
        indptr.append(indptr[-1] + len(w))
    if not cols:
        return sp.csr_matrix((0, vocab_size))
    return sp.csr_matrix((np.concatenate(vals), np.concatenate(cols), np.asarray(indptr)),
                         shape=(len(seqs), vocab_size))


def encode_batch(params: EncoderParams, seqs: Sequence[np.ndarray]) -> np.ndarray:
    pool = pooling_matrix(seqs, params.vocab_size, params.positional_scale)
    return np.asarray(pool @ params.embedding.astype(np.float64, copy=False))


def encode(params: EncoderParams, tokens) -> np.ndarray:
    """Weighted mean of the non-PAD embedding rows (plain mean by default)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0 or not (tokens != PAD).any():
        raise EmptyInputError("cannot encode an empty or all-PAD sequence")
    n = len(tokens)
    if params.positional_scale == 0:
        w = np.ones(n)
    else:
        w = 1.0 + params.positional_scale * np.arange(n) / n
    keep = tokens != PAD
    w = w[keep]
    rows = params.embedding[tokens[keep]].astype(np.float64)
    return (w[:, None] * rows).sum(axis=0) / w.sum()


def score_pair(q_vec, p_vec) -> float:
    q_vec, p_vec = np.asarray(q_vec), np.asarray(p_vec)
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return float(np.dot(q_vec, p_vec))


# -- cross-encoder ---------------------------------------------------------


@dataclass
class CrossEncoderParams:
    """Mean-pooled query/passage vectors ``u, v`` fed through
    ``w2 . tanh(W1^T [u; v; u*v; |u-v|] + b1) + b2``."""

    embedding: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def __post_init__(self):
        d = self.embedding.shape[1]
        h = self.b1.shape[0]
        if h < 1 or self.W1.shape != (4 * d, h) or self.w2.shape != (h,):
            raise ValueError("inconsistent cross-encoder shapes")
        self.b2 = np.asarray(self.b2).reshape(())

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding, "W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "CrossEncoderParams":
        return CrossEncoderParams(**{k: v.copy() for k, v in self.arrays().items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.arrays().values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_cross_params(seed: int, vocab_size: int, d: int, h: int) -> CrossEncoderParams:
    if d < 1 or h < 1:
        raise ValueError("d and h must be >= 1")
    rng = stream(seed, "init-cross")
    emb = rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(vocab_size, d)).astype(np.float32)
    emb[PAD] = 0.0
    W1 = rng.uniform(-1 / np.sqrt(4 * d), 1 / np.sqrt(4 * d), size=(4 * d, h)).astype(np.float32)
    w2 = rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=h).astype(np.float32)
    return CrossEncoderParams(emb, W1, np.zeros(h, np.float32), w2, np.zeros((), np.float32))


def cross_forward(params: CrossEncoderParams, U: np.ndarray, V: np.ndarray):
    """Score rows of pooled query vectors ``U`` against rows of ``V``.

    Returns ``(scores, cache)``; ``cache`` feeds :func:`cross_backward`.
    """
    diff = U - V
    feats = np.concatenate([U, V, U * V, np.abs(diff)], axis=1)
    W1 = params.W1.astype(np.float64, copy=False)
    act = np.tanh(feats @ W1 + params.b1)
    scores = act @ params.w2.astype(np.float64, copy=False) + float(params.b2)
    return scores, (U, V, np.sign(diff), feats, act)


def cross_backward(params: CrossEncoderParams, cache, dscores: np.ndarray):
    """Gradients of ``sum(dscores * scores)`` w.r.t. the head weights and the
    pooled inputs: ``(dict of head grads, dU, dV)``."""
    U, V, sign, feats, act = cache
    d = U.shape[1]
    w2 = params.w2.astype(np.float64, copy=False)
    W1 = params.W1.astype(np.float64, copy=False)
    dz = (dscores[:, None] * w2[None, :]) * (1.0 - act**2)
    grads = {
        "W1": feats.T @ dz,
        "b1": dz.sum(axis=0),
        "w2": act.T @ dscores,
        "b2": np.asarray(dscores.sum()),
    }
    dfeat = dz @ W1.T
    du_abs = dfeat[:, 3 * d :] * sign
    dU = dfeat[:, :d] + dfeat[:, 2 * d : 3 * d] * V + du_abs
    dV = dfeat[:, d : 2 * d] + dfeat[:, 2 * d : 3 * d] * U - du_abs
    return grads, dU, dV


def cross_score(params: CrossEncoderParams, q_tokens, p_tokens) -> float:
    u = encode(EncoderParams(params.embedding), q_tokens)
    v = encode(EncoderParams(params.embedding), p_tokens)
    scores, _ = cross_forward(params, u[None, :], v[None, :])
    return float(scores[0])


def cross_score_batch(params: CrossEncoderParams, q_seqs, p_seqs) -> np.ndarray:
    table = EncoderParams(params.embedding)
    return cross_forward(params, encode_batch(table, q_seqs), encode_batch(table, p_seqs))[0]


# -- persistence -----------------------------------------------------------


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated file")
    return data


def _read_header(fh, path, magic, n_fields):
    got = _read_exact(fh, 4, path)
    if got != magic:
        raise CheckpointError(f"{path}: bad magic {got!r}, expected {magic!r}")
    fields = struct.unpack(f"<{n_fields}I", _read_exact(fh, 4 * n_fields, path))
    if fields[0] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {fields[0]}")
    return fields[1:]


def _read_floats(fh, count, path):
    return np.frombuffer(_read_exact(fh, 4 * count, path), dtype="<f4").astype(np.float32)


def _check_trailing(fh, path):
    if fh.read(1):
        raise CheckpointError(f"{path}: trailing bytes after payload")


def save_checkpoint(params: EncoderParams, path) -> None:
    emb = np.ascontiguousarray(params.embedding, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(ENCODER_MAGIC)
        fh.write(struct.pack("<3I", VERSION, params.vocab_size, params.dim))
        fh.write(emb.tobytes())


def load_checkpoint(path, dim: int | None = None, vocab_size: int | None = None,
                    positional_scale: float = 0.0) -> EncoderParams:
    """Load an encoder checkpoint; ``dim``/``vocab_size`` guard the shape."""
    with open(path, "rb") as fh:
        vocab, d = _read_header(fh, path, ENCODER_MAGIC, 3)
        if dim is not None and d != dim:
            raise CheckpointError(f"{path}: checkpoint has d={d}, expected d={dim}")
        if vocab_size is not None and vocab != vocab_size:
            raise CheckpointError(f"{path}: checkpoint vocab_size={vocab}, expected {vocab_size}")
        emb = _read_floats(fh, vocab * d, path).reshape(vocab, d)
        _check_trailing(fh, path)
    return EncoderParams(emb.copy(), positional_scale)


def save_cross_checkpoint(params: CrossEncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CROSS_MAGIC)
        fh.write(struct.pack("<4I", VERSION, params.vocab_size, params.dim, params.hidden))
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_cross_checkpoint(path) -> CrossEncoderParams:
    with open(path, "rb") as fh:
        vocab, d, h = _read_header(fh, path, CROSS_MAGIC, 4)
        shapes = {"embedding": (vocab, d), "W1": (4 * d, h), "b1": (h,), "w2": (h,), "b2": ()}
        arrays = {k: _read_floats(fh, int(np.prod(s)), path).reshape(s).copy() for k, s in shapes.items()}
        _check_trailing(fh, path)
    return CrossEncoderParams(**arrays)


def save_embeddings(ids: Sequence[int], matrix: np.ndarray, path) -> None:
    """``NSTE`` file: header, then u32 passage ids, then float32 rows."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<3I", VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(np.asarray(ids, dtype="<u4").tobytes())
        fh.write(matrix.tobytes())


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        n, d = _read_header(fh, path, EMBEDDINGS_MAGIC, 3)
        ids = np.frombuffer(_read_exact(fh, 4 * n, path), dtype="<u4").astype(np.int64)
        matrix = _read_floats(fh, n * d, path).reshape(n, d)
        _check_trailing(fh, path)
    return ids, matrix
