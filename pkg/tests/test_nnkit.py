"""Math-core tests: softmax, forward, KD loss gradients, data plumbing."""

import numpy as np
import pytest

from edl import nnkit
from edl.nnkit import (
    Batch, Dataset, Gradients, Model, ModelFileError, NumericError, ShapeError,
    SoftLabelBatch, TrainConfig, evaluate, flatten_grads, flatten_params,
    forward, init_model, kd_loss, make_blobs, partition, pretrain_teacher,
    sgd_step, tempered_softmax, unflatten_grads,
)


def random_model(dims, seed=0):
    return init_model(dims, seed)


def random_batch(rng, b, d, k):
    return Batch(rng.normal(size=(b, d)), rng.integers(0, k, size=b))


def random_soft(rng, b, k, temperature):
    probs = rng.uniform(0.05, 1.0, size=(b, k))
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftLabelBatch(probs, temperature)


class TestTemperedSoftmax:
    def test_uniform_logits_give_uniform_output(self):
        for t in (0.5, 1.0, 7.3):
            np.testing.assert_allclose(tempered_softmax(np.zeros(3), t),
                                       np.ones(3) / 3, atol=1e-15)

    def test_t1_reduces_to_standard_softmax(self):
        z = np.array([1.0, 2.0, 3.0])
        e = np.exp(z - z.max())
        np.testing.assert_allclose(tempered_softmax(z, 1.0), e / e.sum(), rtol=1e-15)

    def test_matches_high_precision_oracle(self):
        # frozen from a 60-digit mpmath evaluation of exp(z_i/T)/sum exp(z_j/T)
        expected = np.array([0.18632372322584757702,
                             0.30719588571849839707,
                             0.5064803910556540259])
        np.testing.assert_allclose(tempered_softmax(np.array([1.0, 2, 3]), 2.0),
                                   expected, rtol=1e-14)

    def test_random_sweep_against_mpmath(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        rng = np.random.default_rng(7)
        for _ in range(25):
            k = int(rng.integers(2, 8))
            z = rng.normal(scale=5.0, size=k)
            t = float(rng.uniform(0.1, 10.0))
            e = [mp.e ** (mp.mpf(float(zi)) / t) for zi in z]
            s = sum(e)
            expected = np.array([float(q / s) for q in e])
            np.testing.assert_allclose(tempered_softmax(z, t), expected, rtol=1e-12)

    def test_rows_sum_to_one_over_many_random_vectors(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=50.0, size=(10_000, 10))
        t = 3.0
        p = tempered_softmax(z, t)
        assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12

    def test_high_temperature_approaches_uniform(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-10, 10, size=(200, 10))
        p = tempered_softmax(z, 1e6)
        assert np.abs(p - 0.1).max() < 1e-5

    def test_argmax_invariant_under_temperature(self):
        rng = np.random.default_rng(2)
        z = rng.normal(scale=4.0, size=(500, 6))
        base = z.argmax(axis=1)
        for t in (0.01, 0.5, 1.0, 10.0, 1e4):
            assert (tempered_softmax(z, t).argmax(axis=1) == base).all()

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            tempered_softmax(np.array([1.0, np.inf]), 1.0)
        with pytest.raises(ValueError):
            tempered_softmax(np.array([1.0, 2.0]), 0.0)
        with pytest.raises(ValueError):
            tempered_softmax(np.array([1.0, 2.0]), -3.0)

    def test_extreme_logits_stay_finite(self):
        p = tempered_softmax(np.array([1e300 and 700.0, -700.0, 0.0]), 1.0)
        assert np.isfinite(p).all() and abs(p.sum() - 1) <= 1e-12


class TestForward:
    def test_zero_model_gives_zero_logits(self):
        m = Model((4, 3), (np.zeros((3, 4)),), (np.zeros(3),))
        out = forward(m, np.ones((5, 4)))
        assert (out == 0).all()

    def test_identity_single_layer(self):
        m = Model((4, 4), (np.eye(4),), (np.zeros(4),))
        x = np.random.default_rng(3).normal(size=(6, 4))
        np.testing.assert_array_equal(forward(m, x), x)

    def test_matches_straight_line_oracle_bit_for_bit(self):
        m = random_model([5, 8, 4, 3], seed=0)
        x = np.random.default_rng(0).normal(size=(7, 5))
        h = np.tanh(x @ m.weights[0].T + m.biases[0])
        h = np.tanh(h @ m.weights[1].T + m.biases[1])
        expected = h @ m.weights[2].T + m.biases[2]
        np.testing.assert_array_equal(forward(m, x), expected)

    def test_dimension_mismatch_raises(self):
        m = random_model([5, 3])
        with pytest.raises(ShapeError):
            forward(m, np.zeros((2, 4)))


class TestKdLoss:
    def test_beta_zero_equals_plain_cross_entropy(self):
        rng = np.random.default_rng(4)
        m = random_model([6, 10, 4], seed=1)
        batch = random_batch(rng, 9, 6, 4)
        cfg = TrainConfig(eta=0.1, alpha=1.0, beta=0.0)
        loss, _ = kd_loss(m, batch, None, cfg)
        logits = forward(m, batch.inputs)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(9), batch.hard_labels].mean()
        assert abs(loss - expected) < 1e-12

    def test_self_distillation_gradient_vanishes(self):
        # alpha=0 and soft labels equal to the student's own tempered output:
        # loss is T^2 * entropy of that distribution, gradient contribution 0.
        rng = np.random.default_rng(5)
        m = random_model([5, 7, 3], seed=2)
        batch = random_batch(rng, 6, 5, 3)
        t = 2.5
        own = tempered_softmax(forward(m, batch.inputs), t)
        soft = SoftLabelBatch(own, t)
        cfg = TrainConfig(eta=0.1, alpha=0.0, beta=1.0, temperature=t)
        loss, grads = kd_loss(m, batch, soft, cfg)
        entropy = -(own * np.log(own)).sum(axis=1).mean()
        assert abs(loss - t * t * entropy) < 1e-10
        for g in (*grads.weights, *grads.biases):
            assert np.abs(g).max() < 1e-12

    @pytest.mark.parametrize("alpha,beta,t", [(1.0, 0.0, 1.0), (0.0, 1.0, 3.0),
                                              (0.7, 0.3, 2.0), (0.2, 1.5, 0.5)])
    def test_gradients_match_finite_differences(self, alpha, beta, t):
        rng = np.random.default_rng(hash((alpha, beta, t)) % 2**32)
        m = random_model([4, 6, 3], seed=3)
        batch = random_batch(rng, 5, 4, 3)
        soft = random_soft(rng, 5, 3, t)
        cfg = TrainConfig(eta=0.1, alpha=alpha, beta=beta, temperature=t)
        _, grads = kd_loss(m, batch, soft, cfg)
        rel = max_fd_relative_error(m, batch, soft, cfg, grads)
        assert rel < 1e-4

    def test_mismatched_soft_batch_raises(self):
        rng = np.random.default_rng(6)
        m = random_model([4, 3])
        batch = random_batch(rng, 5, 4, 3)
        soft = random_soft(rng, 4, 3, 2.0)
        with pytest.raises(ShapeError):
            kd_loss(m, batch, soft, TrainConfig(beta=1.0, alpha=0.0))

    def test_temperature_disagreement_raises(self):
        rng = np.random.default_rng(7)
        m = random_model([4, 3])
        batch = random_batch(rng, 5, 4, 3)
        soft = random_soft(rng, 5, 3, 4.0)
        with pytest.raises(ValueError):
            kd_loss(m, batch, soft, TrainConfig(alpha=0.0, beta=1.0, temperature=2.0))


def max_fd_relative_error(model, batch, soft, cfg, grads, h=1e-5):
    """Central finite differences over every parameter coordinate."""
    worst = 0.0
    flat = flatten_params(model)
    analytic = flatten_grads(grads)
    for i in range(flat.size):
        for sign in (+1, -1):
            bumped = flat.copy()
            bumped[i] += sign * h
            g = unflatten_grads(bumped, model)
            m2 = Model(model.layer_dims, g.weights, g.biases)
            loss = kd_loss(m2, batch, soft, cfg)[0]
            if sign > 0:
                up = loss
            else:
                down = loss
        fd = (up - down) / (2 * h)
        denom = max(abs(fd), abs(analytic[i]), 1e-8)
        worst = max(worst, abs(fd - analytic[i]) / denom)
    return worst


class TestSgdStep:
    def test_eta_zero_is_identity(self):
        m = random_model([3, 2])
        g = Gradients(tuple(np.ones_like(w) for w in m.weights),
                      tuple(np.ones_like(b) for b in m.biases))
        m2 = sgd_step(m, g, 0.0)
        for a, b in zip(flatten_params(m), flatten_params(m2)):
            assert a == b

    def test_zero_grads_is_identity(self):
        m = random_model([3, 2])
        g = Gradients(tuple(np.zeros_like(w) for w in m.weights),
                      tuple(np.zeros_like(b) for b in m.biases))
        np.testing.assert_array_equal(flatten_params(sgd_step(m, g, 0.3)),
                                      flatten_params(m))

    def test_scalar_arithmetic(self):
        m = Model((1, 1), (np.array([[1.0]]),), (np.array([0.0]),))
        g = Gradients((np.array([[2.0]]),), (np.array([0.0]),))
        assert sgd_step(m, g, 0.1).weights[0][0, 0] == pytest.approx(0.8)

    def test_shape_mismatch_raises(self):
        m = random_model([3, 2])
        g = Gradients((np.zeros((2, 4)),), (np.zeros(2),))
        with pytest.raises(ShapeError):
            sgd_step(m, g, 0.1)


class TestEvaluate:
    def test_k_equals_classes_is_always_one(self):
        data = make_blobs(0, 50, 4, 5, 1.0)
        m = random_model([4, 5])
        assert evaluate(m, data, k=5) == 1.0

    def test_constant_logits_tie_break_to_class_zero(self):
        data = make_blobs(1, 200, 3, 10, 1.0)  # labels cycle, exactly balanced
        m = Model((3, 10), (np.zeros((10, 3)),), (np.zeros(10),))
        assert evaluate(m, data, k=1) == pytest.approx(0.1)

    def test_matches_argsort_oracle(self):
        data = make_blobs(2, 300, 6, 8, 2.0)
        m = random_model([6, 12, 8], seed=4)
        logits = forward(m, data.samples)
        for k in (1, 3, 8):
            hits = 0
            for i in range(data.size):
                ranked = sorted(range(8), key=lambda c: (-logits[i, c], c))
                hits += data.labels[i] in ranked[:k]
            assert evaluate(m, data, k) == pytest.approx(hits / data.size)

    def test_rejects_bad_k(self):
        data = make_blobs(3, 10, 2, 3, 1.0)
        m = random_model([2, 3])
        with pytest.raises(ValueError):
            evaluate(m, data, k=4)


class TestData:
    def test_make_blobs_deterministic(self):
        a = make_blobs(42, 100, 5, 4, 1.5)
        b = make_blobs(42, 100, 5, 4, 1.5)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.id == b.id
        assert a.id != make_blobs(43, 100, 5, 4, 1.5).id

    def test_partition_disjoint_and_covering(self):
        data = make_blobs(0, 257, 3, 4, 1.0)
        for world in (1, 2, 3, 7, 64):
            seen = []
            total = 0
            for rank in range(world):
                shard = partition(data, world, rank)
                total += shard.size
                seen.append(shard.samples)
            np.testing.assert_array_equal(np.vstack(seen), data.samples)
            assert total == data.size

    def test_epoch_order_is_a_permutation_and_differs_by_epoch(self):
        a = nnkit.epoch_order(0, 0, 0, 100)
        b = nnkit.epoch_order(0, 1, 0, 100)
        assert sorted(a) == list(range(100))
        assert not (a == b).all()
        np.testing.assert_array_equal(a, nnkit.epoch_order(0, 0, 0, 100))

    def test_pretrain_teacher_learns_separable_blobs(self):
        data = make_blobs(0, 600, 8, 4, 0.6)
        cfg = TrainConfig(eta=0.1, batch_size=32, seed=0)
        model = pretrain_teacher(data, cfg, epochs=8, hidden=(32,))
        assert evaluate(model, data, 1) > 0.95


class TestModelFile:
    def test_round_trip_is_byte_exact(self, tmp_path):
        m = random_model([5, 16, 3], seed=9)
        p = tmp_path / "m.edld"
        nnkit.save_model(str(p), m, iteration=137)
        blob1 = p.read_bytes()
        loaded, it = nnkit.load_model(str(p))
        assert it == 137
        nnkit.save_model(str(p), loaded, iteration=137)
        assert p.read_bytes() == blob1
        np.testing.assert_array_equal(flatten_params(loaded), flatten_params(m))

    def test_header_fields(self):
        m = random_model([2, 2])
        blob = nnkit.serialize_model(m, iteration=7)
        assert blob[:4] == b"EDLD"
        assert int.from_bytes(blob[4:8], "big") == 1
        assert int.from_bytes(blob[8:16], "big") == 7

    def test_rejects_corruption(self):
        m = random_model([2, 3, 2])
        blob = nnkit.serialize_model(m)
        with pytest.raises(ModelFileError):
            nnkit.deserialize_model(b"XXXX" + blob[4:])
        with pytest.raises(ModelFileError):
            nnkit.deserialize_model(blob[:-3])
        with pytest.raises(ModelFileError):
            nnkit.deserialize_model(blob + b"\0" * 8)


class TestTypes:
    def test_soft_label_batch_validation(self):
        good = np.array([[0.25, 0.75]])
        SoftLabelBatch(good, 1.0)
        with pytest.raises(ValueError):
            SoftLabelBatch(np.array([[0.5, 0.6]]), 1.0)
        with pytest.raises(ValueError):
            SoftLabelBatch(np.array([[0.0, 1.0]]), 1.0)
        with pytest.raises(ValueError):
            SoftLabelBatch(good, 0.0)

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(eta=0.0)
        with pytest.raises(ValueError):
            TrainConfig(alpha=0.0, beta=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_model_invariants(self):
        with pytest.raises(ShapeError):
            Model((3, 2), (np.zeros((2, 4)),), (np.zeros(2),))
        with pytest.raises(NumericError):
            Model((2, 2), (np.full((2, 2), np.nan),), (np.zeros(2),))
