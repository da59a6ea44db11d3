"""Loss values, exact logit gradients, and the prediction rules."""

import math

import numpy as np
import pytest

from sflsim.losses import (
    LabelDistribution,
    cross_entropy,
    log_prior,
    logit_adjusted_ce,
    predict,
    predict_balanced,
    softmax_probs,
)


def fd_logit_grad(loss_of_logits, logits, eps=1e-6):
    """Central finite differences of a scalar loss w.r.t. every logit."""
    grad = np.zeros_like(logits)
    it = np.nditer(logits, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = logits.copy()
        bumped[idx] += eps
        plus = loss_of_logits(bumped)
        bumped[idx] -= 2 * eps
        minus = loss_of_logits(bumped)
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


class TestLabelDistribution:
    def test_from_counts(self):
        dist = LabelDistribution.from_counts([2, 2])
        np.testing.assert_allclose(dist.probs, [0.5, 0.5])
        np.testing.assert_array_equal(dist.counts, [2, 2])

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            LabelDistribution(probs=np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LabelDistribution(probs=np.array([1.5, -0.5]))


class TestSoftmax:
    def test_equal_logits_uniform(self):
        probs = softmax_probs(np.zeros((3, 4)))
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_closed_form(self):
        probs = softmax_probs(np.array([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(8, 5))
        np.testing.assert_allclose(
            softmax_probs(logits), softmax_probs(logits + 3.7), atol=1e-12
        )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        probs = softmax_probs(rng.normal(size=(10, 6), scale=40.0))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert (probs >= 0).all()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax_probs(np.array([[0.0, np.inf]]))


class TestCrossEntropy:
    def test_confident_limit(self):
        logits = np.array([[60.0, 0.0, 0.0]])
        out = cross_entropy(logits, np.array([0]))
        assert out.value < 1e-12

    def test_uniform_logits_log_m(self):
        for m in (2, 3, 10):
            out = cross_entropy(np.zeros((4, m)), np.zeros(4, dtype=int))
            np.testing.assert_allclose(out.value, math.log(m), atol=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        out = cross_entropy(logits, labels)
        fd = fd_logit_grad(lambda lg: cross_entropy(lg, labels).value, logits)
        np.testing.assert_allclose(out.logit_grad, fd, rtol=1e-6, atol=1e-9)

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(7)
        out = cross_entropy(rng.normal(size=(6, 5)), rng.integers(0, 5, size=6))
        np.testing.assert_allclose(out.logit_grad.sum(axis=1), 0.0, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestLogPrior:
    def test_uniform(self):
        lp = log_prior(LabelDistribution.uniform(4))
        np.testing.assert_allclose(lp, math.log(0.25), atol=1e-15)

    def test_zero_prior_is_neg_inf(self):
        lp = log_prior(LabelDistribution(probs=np.array([1.0, 0.0])))
        assert lp[0] == 0.0
        assert lp[1] == -np.inf

    def test_zero_prior_class_drops_out(self):
        # adjusted softmax with one zero-prior class equals the softmax over
        # the remaining classes
        logits = np.array([[0.3, -0.7, 1.1]])
        prior = LabelDistribution(probs=np.array([0.5, 0.5, 0.0]))
        out = logit_adjusted_ce(logits, np.array([0]), prior)
        reduced = cross_entropy(logits[:, :2], np.array([0]))
        np.testing.assert_allclose(out.value, reduced.value, atol=1e-12)
        np.testing.assert_allclose(out.logit_grad[:, :2], reduced.logit_grad, atol=1e-12)
        np.testing.assert_allclose(out.logit_grad[:, 2], 0.0, atol=1e-15)


class TestLogitAdjustedCE:
    def test_uniform_prior_reduces_to_plain(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(7, 5))
        labels = rng.integers(0, 5, size=7)
        adj = logit_adjusted_ce(logits, labels, LabelDistribution.uniform(5))
        plain = cross_entropy(logits, labels)
        np.testing.assert_allclose(adj.value, plain.value, atol=1e-12)
        np.testing.assert_allclose(adj.logit_grad, plain.logit_grad, atol=1e-12)

    def test_hand_evaluated_value(self):
        # two classes, zero logits, prior (0.9, 0.1), label 0:
        # adjusted probs are exactly the prior, so the loss is -ln 0.9
        prior = LabelDistribution(probs=np.array([0.9, 0.1]))
        out = logit_adjusted_ce(np.zeros((1, 2)), np.array([0]), prior)
        np.testing.assert_allclose(out.value, -math.log(0.9), atol=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        prior = LabelDistribution(probs=np.array([0.4, 0.3, 0.2, 0.1]))
        out = logit_adjusted_ce(logits, labels, prior)
        fd = fd_logit_grad(
            lambda lg: logit_adjusted_ce(lg, labels, prior).value, logits
        )
        np.testing.assert_allclose(out.logit_grad, fd, rtol=1e-6, atol=1e-9)

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(10)
        prior = LabelDistribution(probs=np.array([0.7, 0.2, 0.1]))
        out = logit_adjusted_ce(
            rng.normal(size=(6, 3)), rng.integers(0, 3, size=6), prior
        )
        np.testing.assert_allclose(out.logit_grad.sum(axis=1), 0.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        prior = LabelDistribution(probs=np.array([0.5, 0.3, 0.2]))
        a = logit_adjusted_ce(logits, labels, prior)
        b = logit_adjusted_ce(logits + 2.5, labels, prior)
        np.testing.assert_allclose(a.value, b.value, atol=1e-12)
        np.testing.assert_allclose(a.logit_grad, b.logit_grad, atol=1e-12)

    def test_zero_prior_target_rejected(self):
        prior = LabelDistribution(probs=np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            logit_adjusted_ce(np.zeros((1, 2)), np.array([1]), prior)


class TestPredict:
    def test_argmax(self):
        assert predict(np.array([[1.0, 3.0, 2.0]]))[0] == 1

    def test_tie_breaks_low(self):
        assert predict(np.array([[2.0, 2.0]]))[0] == 0

    def test_permutation_consistency(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(30, 6))
        base = predict(logits)
        for _ in range(10):
            perm = rng.permutation(6)
            permuted_pred = predict(logits[:, perm])
            np.testing.assert_array_equal(perm[permuted_pred], base)

    def test_shift_invariance(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(40, 5))
        np.testing.assert_array_equal(predict(logits), predict(logits + 11.25))


class TestPredictBalanced:
    def test_uniform_prior_identical_to_plain(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(50, 7))
        np.testing.assert_array_equal(
            predict_balanced(logits, LabelDistribution.uniform(7)), predict(logits)
        )

    def test_log_prior_dominates(self):
        prior = LabelDistribution(probs=np.array([0.99, 0.01]))
        assert predict_balanced(np.zeros((1, 2)), prior)[0] == 1

    def test_zero_prior_class_excluded(self):
        prior = LabelDistribution(probs=np.array([0.5, 0.5, 0.0]))
        logits = np.array([[0.0, -1.0, 100.0]])
        assert predict_balanced(logits, prior)[0] == 0

    def test_improves_balanced_accuracy_for_prior_biased_classifier(self):
        # classifier whose logits are log P(y) + margin * onehot(true class):
        # plain argmax collapses onto frequent classes, the balanced rule
        # recovers the margin signal
        prior = LabelDistribution(probs=np.array([0.7, 0.2, 0.07, 0.03]))
        margin = 0.5
        per_class = 10
        labels = np.repeat(np.arange(4), per_class)
        logits = np.log(prior.probs)[None, :].repeat(labels.size, axis=0)
        logits[np.arange(labels.size), labels] += margin

        def balanced_accuracy(preds):
            return np.mean([np.mean(preds[labels == c] == c) for c in range(4)])

        plain_bal = balanced_accuracy(predict(logits))
        adjusted_bal = balanced_accuracy(predict_balanced(logits, prior))
        assert adjusted_bal >= plain_bal
        assert adjusted_bal == 1.0
