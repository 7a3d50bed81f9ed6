from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nstr.model import EncoderParams, init_params
from nstr.noise import NO_NOISE
from nstr.rng import stream
from nstr.train import (
    CandidateSet,
    ContrastiveData,
    DistillationData,
    Example,
    OptimizerState,
    RowGrad,
    SoftLabel,
    TrainingConfig,
    assemble_batch,
    batch_loss,
    contrastive_loss_and_grad,
    joint_loss,
    kl_divergence,
    kl_loss_and_grad,
    optimizer_step,
    softmax_scores,
    train_epochs,
    write_loss_log,
)


def params_from_vectors(q, passages):
    """Embedding table whose row 3 is ``q`` and rows 4.. are the passages."""
    emb = np.zeros((4 + len(passages), len(q)))
    emb[3] = q
    emb[4:] = passages
    tokens = {i: np.array([4 + i]) for i in range(len(passages))}
    return EncoderParams(emb), np.array([3]), tokens


def separable_fixture(n_pairs=50, seed=0):
    """Each query shares a unique token with its passage and nothing else."""
    vocab = 3 + 3 * n_pairs
    passages = {p: np.array([3 + 3 * p, 4 + 3 * p]) for p in range(n_pairs)}
    queries = {100 + p: np.array([3 + 3 * p, 5 + 3 * p]) for p in range(n_pairs)}
    pairs = [(100 + p, p) for p in range(n_pairs)]
    rng = np.random.default_rng(seed)
    pools = {q: [x for x in rng.permutation(n_pairs).tolist() if x != p][:10] for q, p in pairs}
    return vocab, passages, queries, pairs, pools


class TestSoftmax:
    def test_single(self):
        np.testing.assert_array_equal(softmax_scores([4.2]), [1.0])

    def test_worked(self):
        np.testing.assert_allclose(softmax_scores([1.0, 3.0]), [0.1192, 0.8808], atol=1e-4)

    @given(st.floats(0.01, 100.0))
    def test_argmax_temperature_invariant(self, tau):
        assert int(np.argmax(softmax_scores([1.0, 3.0], tau))) == 1

    def test_rejects_nan_and_empty(self):
        with pytest.raises(ValueError):
            softmax_scores([1.0, float("nan")])
        with pytest.raises(ValueError):
            softmax_scores([])

    def test_large_scores_stable(self):
        p = softmax_scores([1000.0, 1001.0])
        assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


class TestContrastiveLoss:
    def test_uniform_two(self):
        params, q, toks = params_from_vectors([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
        loss, _ = contrastive_loss_and_grad(params, q, CandidateSet(0, 0, (1,)), toks)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_worked_value(self):
        params, q, toks = params_from_vectors([1.0, 0.0], [[2.0, 0.0], [0.0, 5.0]])
        loss, _ = contrastive_loss_and_grad(params, q, CandidateSet(0, 0, (1,)), toks)
        assert loss == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-12)
        assert abs(loss - 0.1269) < 1e-4

    def test_unknown_passage(self):
        params, q, toks = params_from_vectors([1.0], [[1.0]])
        with pytest.raises(KeyError):
            contrastive_loss_and_grad(params, q, CandidateSet(0, 0, (9,)), toks)


class TestKL:
    def test_worked_value(self):
        assert abs(kl_divergence([0.5, 0.5], [0.25, 0.75]) - 0.1438) < 1e-4

    def test_identity_zero_loss_and_grad(self):
        params, q, toks = params_from_vectors([1.0, -0.5], [[2.0, 0.0], [0.3, 1.0], [-1.0, 0.2]])
        cands = CandidateSet(0, 0, (1, 2))
        scores = params.embedding[4:] @ params.embedding[3]
        loss, grads = kl_loss_and_grad(params, softmax_scores(scores), q, cands, toks)
        assert abs(loss) < 1e-12
        np.testing.assert_allclose(grads["embedding"].values, 0.0, atol=1e-12)

    @settings(max_examples=200)
    @given(st.integers(2, 8), st.integers(0, 2**31))
    def test_nonnegative(self, n, seed):
        rng = np.random.default_rng(seed)
        t, s = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert kl_divergence(t, s) >= -1e-15

    def test_one_hot_teacher_equals_contrastive(self):
        params, q, toks = params_from_vectors([1.0, 0.5], [[2.0, 0.0], [0.3, 1.0], [-1.0, 0.2]])
        cands = CandidateSet(0, 0, (1, 2))
        kl, g_kl = kl_loss_and_grad(params, [1.0, 0.0, 0.0], q, cands, toks, noise=NO_NOISE)
        ce, g_ce = contrastive_loss_and_grad(params, q, cands, toks)
        assert kl == pytest.approx(ce, abs=1e-12)
        np.testing.assert_allclose(g_kl["embedding"].values, g_ce["embedding"].values, atol=1e-12)

    def test_length_mismatch(self):
        params, q, toks = params_from_vectors([1.0], [[1.0], [2.0]])
        with pytest.raises(ValueError):
            kl_loss_and_grad(params, [1.0], q, CandidateSet(0, 0, (1,)), toks)


class TestJointLoss:
    def test_matching_teacher_reduces_to_contrastive(self):
        params, q, toks = params_from_vectors([1.0, 0.5], [[2.0, 0.0], [0.3, 1.0]])
        cands = CandidateSet(0, 0, (1,))
        target = softmax_scores(params.embedding[4:] @ params.embedding[3])
        joint, _ = joint_loss(params, [Example(0, q, cands)], [Example(1, q, cands, target)], toks)
        ce, _ = contrastive_loss_and_grad(params, q, cands, toks)
        assert joint == pytest.approx(ce, abs=1e-12)

    def test_empty_side_rejected(self):
        params, q, toks = params_from_vectors([1.0], [[1.0]])
        with pytest.raises(ValueError):
            joint_loss(params, [], [Example(0, q, CandidateSet(0, 0), np.ones(1))], toks)


class TestAssembleBatch:
    def test_in_batch_count(self):
        pairs = [(1, 10), (2, 20)]
        pools = {1: [11, 12, 13], 2: [21, 22]}
        cfg = TrainingConfig(n_hard_negatives=1)
        batch = assemble_batch(pairs, pools, cfg, stream(0, "negatives"))
        assert [len(c) for c in batch] == [3, 3]
        assert batch[0].positive_id == 10 and 20 in batch[0].negative_ids

    def test_without_in_batch(self):
        pairs = [(q, q * 10) for q in range(1, 5)]
        pools = {q: list(range(q * 10 + 1, q * 10 + 9)) for q in range(1, 5)}
        cfg = TrainingConfig(n_hard_negatives=7, use_in_batch_negatives=False)
        for c in assemble_batch(pairs, pools, cfg, stream(0, "negatives")):
            assert len(c) == 8

    def test_deterministic(self):
        pairs = [(1, 0)]
        pools = {1: list(range(1, 40))}
        cfg = TrainingConfig(n_hard_negatives=7)
        a = assemble_batch(pairs, pools, cfg, stream(4, "negatives"))
        b = assemble_batch(pairs, pools, cfg, stream(4, "negatives"))
        assert a == b

    def test_positive_never_negative(self):
        pairs = [(1, 5), (2, 5), (3, 6)]
        pools = {1: [5, 6, 7], 2: [5, 8, 9], 3: [5, 6, 7]}
        cfg = TrainingConfig(n_hard_negatives=2)
        for c in assemble_batch(pairs, pools, cfg, stream(0, "negatives")):
            assert c.positive_id not in c.negative_ids
            assert len(set(c.ids)) == len(c.ids)

    def test_short_pool(self):
        cfg = TrainingConfig(n_hard_negatives=3)
        with pytest.raises(ValueError):
            assemble_batch([(1, 0)], {1: [2]}, cfg, stream(0, "n"))
        (c,) = assemble_batch([(1, 0)], {1: [2]}, cfg, stream(0, "n"), allow_short_pools=True)
        assert c.negative_ids == (2,)

    def test_candidate_set_validation(self):
        with pytest.raises(ValueError):
            CandidateSet(0, 1, (1, 2))
        with pytest.raises(ValueError):
            CandidateSet(0, 1, (2, 2))


class TestOptimizer:
    def test_sgd_update(self):
        params = EncoderParams(np.ones((1, 1)))
        cfg = TrainingConfig(learning_rate=0.1, optimizer="sgd", clip_norm=None)
        optimizer_step(params, {"embedding": np.array([[2.0]])}, cfg)
        assert params.embedding[0, 0] == pytest.approx(0.8)

    def test_zero_gradient(self):
        params = init_params(0, 5, 3)
        before = params.embedding.copy()
        for opt in ("sgd", "adam"):
            optimizer_step(params, {"embedding": np.zeros((5, 3))}, TrainingConfig(optimizer=opt))
        np.testing.assert_array_equal(params.embedding, before)

    def test_adam_first_step(self):
        params = EncoderParams(np.zeros((3, 2)))
        cfg = TrainingConfig(learning_rate=0.01, optimizer="adam", clip_norm=None)
        optimizer_step(params, {"embedding": np.ones((3, 2))}, cfg, OptimizerState())
        # m_hat = v_hat = 1, so every coordinate moves by lr / (1 + eps)
        np.testing.assert_allclose(params.embedding, -0.01 / (1 + 1e-8), rtol=1e-12)

    def test_row_grad_equals_dense(self):
        a, b = EncoderParams(np.ones((4, 2))), EncoderParams(np.ones((4, 2)))
        rg = RowGrad(np.array([1, 3]), np.array([[1.0, 2.0], [3.0, 4.0]]))
        cfg = TrainingConfig(learning_rate=0.5, optimizer="sgd", clip_norm=None)
        optimizer_step(a, {"embedding": rg}, cfg)
        optimizer_step(b, {"embedding": rg.to_dense((4, 2))}, cfg)
        np.testing.assert_array_equal(a.embedding, b.embedding)

    def test_clipping(self):
        params = EncoderParams(np.zeros((1, 2)))
        cfg = TrainingConfig(learning_rate=1.0, optimizer="sgd", clip_norm=5.0)
        optimizer_step(params, {"embedding": np.array([[30.0, 40.0]])}, cfg)
        np.testing.assert_allclose(params.embedding, [[-3.0, -4.0]])

    def test_non_finite_rejected(self):
        params = EncoderParams(np.zeros((1, 1)))
        with pytest.raises(FloatingPointError):
            optimizer_step(params, {"embedding": np.array([[np.inf]])}, TrainingConfig())

    def test_dtype_preserved(self):
        params = init_params(0, 5, 3)
        optimizer_step(params, {"embedding": np.ones((5, 3))}, TrainingConfig(optimizer="sgd"))
        assert params.embedding.dtype == np.float32

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainingConfig(temperature=0.0)


class TestTrainEpochs:
    def data(self):
        vocab, passages, queries, pairs, pools = separable_fixture()
        return vocab, ContrastiveData(pairs, pools, queries, passages)

    def test_zero_lr_fixed_point(self):
        vocab, data = self.data()
        params = init_params(0, vocab, 8)
        before = params.embedding.copy()
        train_epochs(params, data, TrainingConfig(learning_rate=0.0, epochs=3))
        np.testing.assert_array_equal(params.embedding, before)

    def test_deterministic_bytes(self):
        vocab, data = self.data()
        runs = [train_epochs(init_params(0, vocab, 8), data, TrainingConfig(epochs=2, seed=5))[0] for _ in range(2)]
        assert runs[0].embedding.tobytes() == runs[1].embedding.tobytes()

    def test_loss_decreases(self):
        vocab, data = self.data()
        cfg = TrainingConfig(learning_rate=0.01, epochs=10, batch_size=8)
        _, history = train_epochs(init_params(0, vocab, 16), data, cfg)
        assert [e for e, _ in history] == list(range(1, 11))
        assert history[-1][1] < history[0][1]

    def test_kl_training_runs_with_noise(self):
        vocab, passages, queries, pairs, pools = separable_fixture(10)
        records = [SoftLabel(q, (p,) + tuple(pools[q][:3]), np.array([0.7, 0.1, 0.1, 0.1])) for q, p in pairs]
        data = DistillationData(records, queries, passages)
        params, history = train_epochs(init_params(0, vocab, 8), data, TrainingConfig(epochs=2), "kl")
        assert len(history) == 2 and all(np.isfinite(l) for _, l in history)

    def test_unknown_kind(self):
        vocab, data = self.data()
        with pytest.raises(ValueError):
            train_epochs(init_params(0, vocab, 4), data, TrainingConfig(), "hinge")

    def test_loss_log(self, tmp_path):
        write_loss_log([(1, 0.5), (2, 0.25)], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text() == "epoch,loss\n1,0.5\n2,0.25\n"

    def test_batch_loss_is_mean(self):
        params, q, toks = params_from_vectors([1.0, 0.0], [[2.0, 0.0], [0.0, 5.0]])
        a = Example(0, q, CandidateSet(0, 0, (1,)))
        b = Example(1, q, CandidateSet(1, 1, (0,)))
        la, _ = batch_loss(params, [a], toks)
        lb, _ = batch_loss(params, [b], toks)
        lab, _ = batch_loss(params, [a, b], toks)
        assert lab == pytest.approx((la + lb) / 2, abs=1e-12)
