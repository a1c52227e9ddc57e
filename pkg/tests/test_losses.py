import numpy as np
import pytest

from hybridlab import nn
from hybridlab.losses import (LossWeights, MixedBatch, compound_loss,
                              compound_loss_and_grad_vec, loss_cls, loss_d,
                              loss_x_exact, loss_x_ub)
from hybridlab.model import (VOID, build_hybrid_model, model_params,
                             set_model_params)
from hybridlab.ops import logsumexp, softmax


def random_batch(rng, n=16, k=3, n_neg=5):
    logits = rng.normal(size=(n, k))
    labels = rng.integers(0, k, size=n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=n_neg, replace=False)] = True
    labels[mask] = VOID
    return logits, labels, mask


class TestLossCls:
    def test_uniform_logits(self):
        logits = np.zeros((6, 4))
        labels = np.array([0, 1, 2, 3, 0, 1])
        assert loss_cls(logits, labels) == pytest.approx(np.log(4.0))

    def test_monotone_in_margin(self):
        losses = []
        for margin in (0.0, 0.5, 1.0, 2.0, 4.0):
            logits = np.zeros((1, 3))
            logits[0, 0] = margin
            losses.append(loss_cls(logits, np.array([0])))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_matches_softmax_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(10, 2))
        labels = rng.integers(0, 2, size=10)
        expected = -np.mean(np.log(softmax(logits)[np.arange(10), labels]))
        assert loss_cls(logits, labels) == pytest.approx(expected, rel=1e-12)

    def test_all_void_rejected(self):
        with pytest.raises(ValueError):
            loss_cls(np.zeros((3, 2)), np.full(3, VOID))


class TestLossXExact:
    def test_identical_logits_cancel(self):
        logits = np.tile(np.array([[0.7, -0.3]]), (8, 1))
        mask = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=bool)
        assert loss_x_exact(logits, mask) == pytest.approx(0.0, abs=1e-12)

    def test_arithmetic(self):
        # one inlier with LSE 3, one negative with LSE 1
        logits = np.array([[3.0 - np.log(2.0)] * 2, [1.0 - np.log(2.0)] * 2])
        mask = np.array([0, 1], dtype=bool)
        assert loss_x_exact(logits, mask) == pytest.approx(-2.0)

    def test_matches_lse_oracle(self):
        rng = np.random.default_rng(1)
        logits, labels, mask = random_batch(rng)
        lse = logsumexp(logits, axis=1)
        inlier = ~mask
        expected = -lse[inlier].mean() + lse[mask].mean()
        assert loss_x_exact(logits, mask) == pytest.approx(expected, rel=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        logits, labels, mask = random_batch(rng)
        base = loss_x_exact(logits, mask)
        assert loss_x_exact(logits + 11.0, mask) == pytest.approx(base, abs=1e-9)

    def test_one_side_empty(self):
        with pytest.raises(ValueError):
            loss_x_exact(np.zeros((4, 2)), np.zeros(4, dtype=bool))


class TestLossXUpperBound:
    def test_strictly_above_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            logits, labels, mask = random_batch(rng)
            exact = loss_x_exact(logits, mask, labels)
            ub = loss_x_ub(logits, labels, mask)
            assert ub > exact  # LSE(s) > s_y for finite logits, K >= 2

    def test_gap_closes_at_large_margin(self):
        labels = np.array([0, VOID])
        mask = np.array([0, 1], dtype=bool)
        gaps = []
        for margin in (2.0, 10.0, 50.0):
            logits = np.array([[margin, 0.0], [0.0, 0.0]])
            gaps.append(loss_x_ub(logits, labels, mask)
                        - loss_x_exact(logits, mask, labels))
        assert gaps[0] > gaps[1] > 0.0
        # at margin 50 the gap underflows below float resolution
        assert 0.0 <= gaps[2] < 1e-12

    def test_global_shift_cancels_between_partitions(self):
        # the -s_y side shifts by -c, the LSE side by +c; the per-partition
        # means make the two cancel exactly, as they do for the exact loss
        rng = np.random.default_rng(4)
        logits, labels, mask = random_batch(rng)
        base = loss_x_ub(logits, labels, mask)
        shifted = loss_x_ub(logits + 5.0, labels, mask)
        assert shifted == pytest.approx(base, abs=1e-9)


class TestLossD:
    def test_half_everywhere(self):
        p = np.full(6, 0.5)
        mask = np.array([0, 0, 0, 1, 1, 1], dtype=bool)
        assert loss_d(p, mask) == pytest.approx(2.0 * np.log(2.0))

    def test_perfect_separation(self):
        eps = 1e-12
        p = np.array([1.0 - eps, 1.0 - eps, eps, eps])
        mask = np.array([0, 0, 1, 1], dtype=bool)
        assert loss_d(p, mask) < 1e-10

    def test_matches_bce_oracle(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.05, 0.95, size=12)
        mask = np.zeros(12, dtype=bool)
        mask[:4] = True
        expected = -np.log(p[~mask]).mean() - np.log(1.0 - p[mask]).mean()
        assert loss_d(p, mask) == pytest.approx(expected, rel=1e-12)

    def test_domain_check(self):
        with pytest.raises(ValueError):
            loss_d(np.array([0.0, 0.5]), np.array([0, 1], dtype=bool))


class TestCompound:
    @pytest.fixture
    def model(self):
        return build_hybrid_model(2, 4, hidden=12, depth=2,
                                  posterior_hidden=6, seed=1)

    def make_batch(self, rng, model, n=20, n_neg=6):
        x = rng.normal(size=(n, model.in_dim))
        labels = rng.integers(0, model.n_classes, size=n)
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=n_neg, replace=False)] = True
        labels[mask] = VOID
        return MixedBatch(x, labels, mask)

    def test_reduces_to_cls(self, model):
        rng = np.random.default_rng(6)
        batch = self.make_batch(rng, model)
        weights = LossWeights(1.0, 0.0, 0.0, 0.0)
        total, _, _ = compound_loss(model, batch, weights)
        from hybridlab.model import forward_all
        _, logits, _, _ = forward_all(model, batch.inputs)
        assert total == pytest.approx(loss_cls(logits, batch.labels), rel=1e-12)

    def test_term_by_term_arithmetic(self):
        # all-zero model: logits 0 (K=4), posterior logit 0
        model = build_hybrid_model(2, 4, hidden=4, depth=1,
                                   posterior_hidden=3, seed=0)
        vec = np.zeros(model_params(model).size)
        set_model_params(model, vec)
        x = np.zeros((8, 2))
        labels = np.array([0, 1, 2, 3, VOID, VOID, VOID, VOID])
        mask = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=bool)
        batch = MixedBatch(x, labels, mask)
        total, _, parts = compound_loss(model, batch, LossWeights(1, 1, 1, 1))
        ln4, ln2 = np.log(4.0), np.log(2.0)
        assert parts["cls"] == pytest.approx(ln4)
        assert parts["d_in"] == pytest.approx(ln2)
        assert parts["d_neg"] == pytest.approx(ln2)
        assert parts["x_neg"] == pytest.approx(ln4)
        assert total == pytest.approx(2 * ln4 + 2 * ln2)

    @pytest.mark.parametrize("likelihood", ["ub", "exact"])
    def test_gradients_match_finite_differences(self, model, likelihood):
        rng = np.random.default_rng(7)
        batch = self.make_batch(rng, model)
        weights = LossWeights()
        p0 = model_params(model)

        def loss_and_grad(vec):
            set_model_params(model, vec)
            return compound_loss_and_grad_vec(model, batch, weights, likelihood)

        assert nn.finite_difference_check(loss_and_grad, p0) < 1e-4

    def test_exact_form_adds_inlier_density_term(self, model):
        rng = np.random.default_rng(12)
        batch = self.make_batch(rng, model)
        from hybridlab.model import forward_all
        from hybridlab.ops import logsumexp
        ub, _, _ = compound_loss(model, batch, LossWeights())
        exact, _, _ = compound_loss(model, batch, LossWeights(),
                                    likelihood="exact")
        _, logits, _, _ = forward_all(model, batch.inputs)
        inlier = (~batch.mask) & (batch.labels != VOID)
        lse_in = logsumexp(logits[inlier], axis=-1).mean()
        assert exact == pytest.approx(ub - 0.03 * lse_in, rel=1e-12)

    def test_void_inliers_contribute_nothing(self, model):
        rng = np.random.default_rng(8)
        batch = self.make_batch(rng, model, n=20, n_neg=5)
        copy_labels = batch.labels.copy()
        # voiding an inlier element must change no loss term once removed
        drop = np.flatnonzero(~batch.mask)[0]
        copy_labels[drop] = VOID
        voided = MixedBatch(batch.inputs, copy_labels, batch.mask)
        keep = np.ones(20, dtype=bool)
        keep[drop] = False
        removed = MixedBatch(batch.inputs[keep], batch.labels[keep],
                             batch.mask[keep])
        t_voided, _, _ = compound_loss(model, voided, LossWeights())
        t_removed, _, _ = compound_loss(model, removed, LossWeights())
        assert t_voided == pytest.approx(t_removed, rel=1e-12)

    def test_permutation_invariance(self, model):
        rng = np.random.default_rng(9)
        batch = self.make_batch(rng, model)
        perm = rng.permutation(20)
        shuffled = MixedBatch(batch.inputs[perm], batch.labels[perm],
                              batch.mask[perm])
        a, _, _ = compound_loss(model, batch, LossWeights())
        b, _, _ = compound_loss(model, shuffled, LossWeights())
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_negative_partition_rejected(self, model):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 2))
        labels = rng.integers(0, 4, size=6)
        batch = MixedBatch(x, labels, np.zeros(6, dtype=bool))
        with pytest.raises(ValueError):
            compound_loss(model, batch, LossWeights())
        # allowed when the negative-side terms are switched off
        total, _, _ = compound_loss(model, batch, LossWeights(1, 0, 0, 0))
        assert np.isfinite(total)


class TestWeights:
    def test_beta1_positive(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.3, 0.3, 0.03)

    def test_non_negative(self):
        with pytest.raises(ValueError):
            LossWeights(1.0, -0.1, 0.3, 0.03)

    def test_masked_elements_must_be_void(self):
        with pytest.raises(ValueError):
            MixedBatch(np.zeros((2, 2)), np.array([0, 1]),
                       np.array([0, 1], dtype=bool))
