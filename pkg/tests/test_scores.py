import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import gammaln

from fishy.errors import ContractViolation
from fishy.numerics import AdamState, adam_update
from fishy.scores import (
    dirichlet_differential_entropy,
    dirichlet_kl,
    entropy_score,
    max_prob_score,
    mutual_information,
    predictive_entropy,
    prior_network_loss,
    smoothed_targets,
    softmax,
    void_class_score,
)

from conftest import central_diff


def decimal_softmax(row):
    getcontext().prec = 50
    vals = [Decimal(float(v)) for v in row]
    m = max(vals)
    ex = [(v - m).exp() for v in vals]
    total = sum(ex)
    return [float(e / total) for e in ex]


def test_softmax_uniform_and_stable():
    p = softmax(np.zeros((2, 3, 19)))
    np.testing.assert_allclose(p, 1 / 19, atol=1e-16)
    assert softmax(np.array([1e6, 0.0])).tolist() == [1.0, 0.0]


def test_softmax_matches_extended_precision():
    logits = np.random.default_rng(0).normal(scale=5.0, size=(20, 7))
    p = softmax(logits)
    for row, got in zip(logits, p):
        np.testing.assert_allclose(got, decimal_softmax(row), rtol=0, atol=1e-12)


def test_max_prob_and_entropy_anchors():
    assert max_prob_score(np.array([0.0, 1.0, 0.0])) == 0.0
    assert max_prob_score(np.full(19, 1 / 19)) == pytest.approx(1 - 1 / 19, abs=1e-15)
    assert max_prob_score(np.array([0.7, 0.3])) == pytest.approx(0.3, abs=1e-15)
    assert entropy_score(np.array([0.0, 1.0, 0.0])) == 0.0
    assert entropy_score(np.full(19, 1 / 19)) == pytest.approx(2.944439, abs=1e-6)
    assert entropy_score(np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)


def test_entropy_permutation_invariant():
    r = np.random.default_rng(1)
    p = r.dirichlet(np.ones(6), size=50)
    perm = r.permutation(6)
    np.testing.assert_allclose(entropy_score(p[:, perm]), entropy_score(p), atol=1e-14)


def test_predictive_entropy_cases():
    onehot = np.tile(np.array([1.0, 0.0, 0.0]), (4, 1))
    assert predictive_entropy(onehot[:, None, :]).tolist() == [0.0]
    pair = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert predictive_entropy(pair)[0] == pytest.approx(math.log(2), abs=1e-15)
    stack = np.random.default_rng(2).dirichlet(np.ones(5), size=(6, 3, 4))
    np.testing.assert_allclose(predictive_entropy(stack), entropy_score(stack.mean(axis=0)), rtol=0, atol=1e-15)


def test_mutual_information_cases():
    p = np.random.default_rng(3).dirichlet(np.ones(4), size=(2, 2))
    same = np.stack([p] * 5)
    assert np.all(mutual_information(same) == 0.0)
    pair = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert mutual_information(pair)[0] == pytest.approx(math.log(2), abs=1e-15)


def test_mc_stack_needs_samples():
    with pytest.raises(ContractViolation):
        predictive_entropy(np.zeros((0, 3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 10**6))
def test_information_ordering(t, c, seed):
    r = np.random.default_rng(seed)
    stack = r.dirichlet(np.full(c, r.uniform(0.05, 3.0)), size=(t, 200))
    mi = mutual_information(stack)
    pe = predictive_entropy(stack)
    assert np.all(mi >= 0)
    assert np.all(mi <= pe + 1e-12)
    assert np.all(pe <= math.log(c) + 1e-12)


def test_dirichlet_entropy_anchors():
    assert dirichlet_differential_entropy(np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-15)
    assert dirichlet_differential_entropy(np.full(5, 100.0)) < dirichlet_differential_entropy(np.ones(5))
    with pytest.raises(ContractViolation):
        dirichlet_differential_entropy(np.array([1.0, 0.0]))


def test_dirichlet_entropy_matches_monte_carlo():
    alpha = np.array([2.0, 3.0, 4.0])
    x = np.random.default_rng(4).dirichlet(alpha, size=200_000)
    mc = -float(np.mean(stats.dirichlet.logpdf(x.T, alpha)))
    assert abs(dirichlet_differential_entropy(alpha) - mc) < 0.02


def test_dirichlet_kl_basic():
    a = np.array([0.5, 2.0, 7.0])
    assert dirichlet_kl(a, a) == 0.0
    assert dirichlet_kl(np.array([1.0, 2.0]), np.array([2.0, 1.0])) == pytest.approx(
        float(dirichlet_kl(np.array([2.0, 1.0]), np.array([1.0, 2.0]))), abs=1e-14
    )
    with pytest.raises(ContractViolation):
        dirichlet_kl(np.array([1.0, -1.0]), np.ones(2))
    with pytest.raises(ContractViolation):
        dirichlet_kl(np.ones(2), np.ones(3))


def test_dirichlet_kl_matches_quadrature():
    def beta_logpdf(x, a, b):
        return (a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - (gammaln(a) + gammaln(b) - gammaln(a + b))

    def integrand(x):
        lp = beta_logpdf(x, 2.0, 1.0)
        return math.exp(lp) * (lp - beta_logpdf(x, 1.0, 1.0))

    ref, _ = integrate.quad(integrand, 0.0, 1.0)
    assert abs(dirichlet_kl(np.array([2.0, 1.0]), np.array([1.0, 1.0])) - ref) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_dirichlet_kl_nonnegative(c, seed):
    r = np.random.default_rng(seed)
    p = r.uniform(0.1, 20.0, size=c)
    q = r.uniform(0.1, 20.0, size=c)
    assert dirichlet_kl(p, q) > 1e-10 or np.allclose(p, q)
    assert dirichlet_kl(p, p) <= 1e-10


def test_smoothed_targets():
    t = smoothed_targets(np.array([1, 255]), 3, 0.01)
    np.testing.assert_allclose(t[0], [0.01 / 3, 0.99 + 0.01 / 3, 0.01 / 3], atol=1e-16)
    assert not t[1].any()


def _pieces(logits, labels, ood, alpha0, eps, w):
    """Loss rebuilt pixel by pixel from the public KL and a hand-written CE."""
    c = logits.shape[-1]
    kl_in, ce, kl_out = [], [], []
    for idx in np.ndindex(labels.shape):
        a = np.exp(logits[idx])
        if ood[idx] != 0:
            kl_out.append(float(dirichlet_kl(np.ones(c), a)))
        elif labels[idx] < c:
            tgt = np.full(c, eps / c)
            tgt[labels[idx]] += 1 - eps
            kl_in.append(float(dirichlet_kl(alpha0 * tgt, a)))
            lse = math.log(sum(math.exp(v) for v in logits[idx]))
            ce.append(-sum(t * (v - lse) for t, v in zip(tgt, logits[idx])))
    total = 0.0
    if kl_in:
        total += w[0] * np.mean(kl_in) + np.mean(ce)
    if kl_out:
        total += w[1] * np.mean(kl_out)
    return total, kl_in, ce, kl_out


def test_prior_loss_compositional():
    r = np.random.default_rng(5)
    logits = r.normal(size=(4, 4, 3))
    labels = r.integers(0, 3, size=(4, 4))
    labels[0, 0] = 255
    ood = (r.random((4, 4)) < 0.3).astype(np.uint8)
    ref = _pieces(logits, labels, ood, 100.0, 0.01, (0.1, 0.1))[0]
    assert prior_network_loss(logits, labels, ood) == pytest.approx(ref, abs=1e-12)


def test_prior_loss_first_term_vanishes_at_target():
    labels = np.array([[0, 1], [2, 1]])
    alpha_in = 100.0 * smoothed_targets(labels, 3, 0.01)
    logits = np.log(alpha_in)
    ood = np.zeros((2, 2), dtype=np.uint8)
    _, kl_in, ce, _ = _pieces(logits, labels, ood, 100.0, 0.01, (0.1, 0.1))
    assert max(kl_in) < 1e-10
    assert prior_network_loss(logits, labels, ood) == pytest.approx(float(np.mean(ce)), abs=1e-10)


def test_prior_loss_second_term_vanishes_at_flat():
    logits = np.zeros((3, 3, 4))
    assert prior_network_loss(logits, np.zeros((3, 3), int), np.ones((3, 3))) == 0.0


def test_prior_loss_gradient_and_descent():
    r = np.random.default_rng(6)
    logits = r.normal(size=(4, 4, 3))
    labels = r.integers(0, 3, size=(4, 4))
    ood = (r.random((4, 4)) < 0.4).astype(np.uint8)
    loss, grad = prior_network_loss(logits, labels, ood, return_grad=True)
    fd = central_diff(lambda z: prior_network_loss(z, labels, ood), logits, h=1e-6)
    np.testing.assert_allclose(grad, fd, atol=1e-7)
    (new,), _ = adam_update([logits], [grad], AdamState.for_params([logits]), 0.01)
    assert prior_network_loss(new, labels, ood) < loss


def test_prior_loss_argument_checks():
    with pytest.raises(ContractViolation):
        prior_network_loss(np.zeros((2, 2, 3)), np.zeros((2, 2), int), np.zeros((2, 2)), alpha0=0)
    with pytest.raises(ContractViolation):
        prior_network_loss(np.zeros((2, 2, 3)), np.zeros((2, 2), int), np.zeros((2, 2)), label_eps=1.0)


def test_void_class_score():
    assert void_class_score(np.array([0.0, 0.0, 1.0]), 2) == 1.0
    assert void_class_score(np.array([1.0, 0.0, 0.0]), 2) == 0.0
    assert void_class_score(np.full(20, 0.05), 19) == pytest.approx(0.05)
    with pytest.raises(ContractViolation):
        void_class_score(np.ones(3) / 3, 3)
