import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.special import expit

from bisnn.gradcheck import estimator_check
from bisnn.network import CLASSIFICATION, Network
from bisnn.oracles import exact_mean_gradient_oracle, expected_loss, gibbs_posterior_oracle
from bisnn.train_bayes import (
    BayesHyperparams, bayes_step, bernoulli_kl, free_energy, gs_gradient_scale, gs_sample,
    logits_from_means, logits_from_probabilities, map_weights, mean_params, natural_update,
    probabilities, sample_binary, step_rng,
)
from bisnn.train_st import binarize


class ConstantRng:
    def __init__(self, value):
        self.value = value

    def random(self, shape):
        return np.full(shape, self.value)


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        BayesHyperparams(eta=1.0)
    with pytest.raises(ValueError):
        BayesHyperparams(tau_gs=0.0)


def test_gs_midpoint_and_example():
    assert gs_sample(np.array(0.0), 1.0, ConstantRng(0.5)) == 0.0
    assert gs_sample(np.array(1.0), 0.5, ConstantRng(0.5)) == pytest.approx(0.9640275800758169, abs=1e-15)


def test_gs_clamps_extreme_uniforms():
    assert np.isfinite(gs_sample(np.zeros(3), 0.1, ConstantRng(0.0))).all()
    assert np.isfinite(gs_sample(np.zeros(3), 0.1, ConstantRng(1.0))).all()


def _sign_law_pvalue(logit, tau, n, seed):
    w = gs_sample(np.full(n, logit), tau, step_rng(seed, 0))
    k = int(np.sum(w > 0))
    p = expit(2 * logit)
    return stats.chisquare([k, n - k], [n * p, n * (1 - p)]).pvalue


def test_sign_law_at_half():
    n = 100_000
    w = gs_sample(np.full(n, 0.5), 0.3, step_rng(1, 0))
    assert np.mean(w > 0) == pytest.approx(0.7310585786300049, abs=0.005)
    assert _sign_law_pvalue(0.5, 0.3, n, 1) > 0.01


def test_gradient_scale_examples():
    assert gs_gradient_scale(0.0, 0.0, 1.0) == 1.0
    assert gs_gradient_scale(0.0, 0.0, 0.5) == 2.0
    assert gs_gradient_scale(1.0, np.tanh(1.0), 1.0) == pytest.approx(1.0, rel=1e-12)


def test_gradient_scale_large_logits_finite():
    assert np.isfinite(gs_gradient_scale(np.array([400.0, -1e6]), np.array([0.5, -0.5]), 0.1)).all()


def _net():
    return Network.build(3, [4], 2, CLASSIFICATION, readout_seed=2)


def test_zero_gradient_shrinks_logits():
    net = _net()
    hyper = BayesHyperparams(rho=0.5, eta=0.2)
    x0 = net.init_weights(np.random.default_rng(0), -2, 2)
    new, _ = bayes_step(x0, np.zeros((8, 2, 3), dtype=np.uint8), np.array([0, 1]), hyper, net, step_rng(0, 0))
    for a, b in zip(new, x0):
        np.testing.assert_allclose(a, (1 - 0.1) * b, rtol=1e-15)


def test_zero_gradient_converges_to_prior_geometrically():
    rng = np.random.default_rng(1)
    prior = [rng.normal(size=(4, 3))]
    hyper = BayesHyperparams(rho=2.0, eta=0.1, prior_logits=prior)
    x = [rng.normal(size=(4, 3)) * 5]
    zero = [np.zeros((4, 3))]
    d0 = np.linalg.norm(x[0] - prior[0])
    for k in range(1, 200):
        x = natural_update(x, zero, hyper)
        assert np.linalg.norm(x[0] - prior[0]) <= (0.8**k) * d0 * (1 + 1e-12) + 1e-15
    np.testing.assert_allclose(x[0], prior[0], atol=1e-15)


def test_table_rows_parity():
    """Both rules on shared inputs, written out as in the rule-comparison table."""
    net = _net()
    rng = np.random.default_rng(5)
    wr = net.init_weights(rng, -1, 1)
    x = (rng.random((25, 3, 3)) < 0.5).astype(np.uint8)
    y = np.array([0, 1, 1])
    eta, rho, tau = 0.1, 0.3, 0.7

    # ST row: w = sign(w_r); w_r <- w_r - eta * grad at w
    from bisnn.train_st import st_step

    w = binarize(wr)
    _, g, _ = net.loss_and_gradient(w, x, y)
    st_new, _ = st_step(wr, x, y, eta, net)
    for a, b, gi in zip(st_new, wr, g):
        np.testing.assert_allclose(a, b - eta * gi / 3, atol=1e-15)

    # Bayes row (uniform prior): w = tanh((w_r + delta) / tau);
    # w_r <- (1 - eta rho) w_r - eta (1 - w^2) / (tau (1 - tanh^2 w_r)) * grad at w
    hyper = BayesHyperparams(rho=rho, eta=eta, tau_gs=tau)
    w = gs_sample(wr, tau, step_rng(9, 4))
    _, g, _ = net.loss_and_gradient(w, x, y)
    bayes_new, _ = bayes_step(wr, x, y, hyper, net, step_rng(9, 4))
    for a, b, wi, gi in zip(bayes_new, wr, w, g):
        expected = (1 - eta * rho) * b - eta * (1 - wi**2) / (tau * (1 - np.tanh(b) ** 2)) * gi / 3
        np.testing.assert_allclose(a, expected, rtol=1e-12, atol=1e-15)


def test_bayes_step_non_finite_aborts(monkeypatch):
    net = _net()
    logits = net.init_weights(np.random.default_rng(0))
    monkeypatch.setattr(net, "loss_and_gradient",
                        lambda *a: (np.zeros(1), [np.full(s, np.inf) for s in net.weight_shapes], None))
    with pytest.raises(FloatingPointError):
        bayes_step(logits, np.zeros((4, 1, 3), dtype=np.uint8), np.array([0]), BayesHyperparams(),
                   net, step_rng(0, 0))


def test_exact_oracle_simple_cases():
    np.testing.assert_allclose(exact_mean_gradient_oracle(lambda w: 3.0, np.zeros(3)), 0.0)
    assert exact_mean_gradient_oracle(lambda w: float(w[0] > 0), np.array([0.4]))[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        exact_mean_gradient_oracle(lambda w: 0.0, np.zeros(17))


def test_exact_oracle_matches_symbolic_quadratic():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    logits = rng.normal(size=3)

    def loss(w):
        return float(w @ A @ w + b @ w + np.sin(w[0] * w[2]))

    mu = sympy.symbols("m0:3")
    total = 0
    for cfg in np.array(np.meshgrid(*[[1, -1]] * 3)).T.reshape(-1, 3):
        q = sympy.Mul(*[(1 + m * int(c)) / 2 for m, c in zip(mu, cfg)])
        total += q * loss(cfg.astype(float))
    subs = dict(zip(mu, np.tanh(logits)))
    symbolic = [float(sympy.diff(total, m).subs(subs)) for m in mu]
    np.testing.assert_allclose(exact_mean_gradient_oracle(loss, logits), symbolic, rtol=1e-10)


def test_estimator_matches_enumeration_three_weights():
    coeffs = {(0,): 0.7, (1,): -1.2, (2,): 0.4, (0, 1): 0.9, (1, 2): -0.6, (0, 2): 0.3, (0, 1, 2): 0.5}
    mean, se, exact = estimator_check(coeffs, np.array([0.3, -0.5, 0.8]), tau_gs=0.05, seed=11)
    assert np.all(np.abs(mean - exact) <= 3 * se)


def test_gibbs_oracle():
    configs, q = gibbs_posterior_oracle(lambda w: 1.0, np.array([0.3, -0.2]), 1.0)
    prior = np.prod(expit(2 * np.array([0.3, -0.2]) * configs), axis=1)
    np.testing.assert_allclose(q, prior, rtol=1e-12)

    configs, q = gibbs_posterior_oracle(lambda w: float(w[0] > 0), np.zeros(2), 1.0)
    p_plus = q[configs[:, 0] > 0].sum()
    assert p_plus == pytest.approx(0.2689414213699951, abs=1e-15)

    _, q_hot = gibbs_posterior_oracle(lambda w: float(w.sum()), np.array([0.5, 0.1]), 1e8)
    prior = np.prod(expit(2 * np.array([0.5, 0.1]) * configs), axis=1)
    np.testing.assert_allclose(q_hot, prior, atol=1e-7)
    with pytest.raises(ValueError):
        gibbs_posterior_oracle(lambda w: 0.0, np.zeros(2), 0.0)


def test_gibbs_posterior_minimizes_free_energy_over_mean_field():
    # the exact minimizer's free energy lower-bounds any mean-field member
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3))
    loss = lambda w: float(w @ A @ w)  # noqa: E731
    rho = 0.7
    configs, q = gibbs_posterior_oracle(loss, np.zeros(3), rho)
    L = np.array([loss(c) for c in configs])
    gibbs_fe = float(q @ L + rho * np.sum(q * np.log(q * 8)))
    for _ in range(20):
        logits = rng.normal(size=3)
        mf = expected_loss(loss, logits) + rho * bernoulli_kl([logits], [np.zeros(3)])
        assert mf >= gibbs_fe - 1e-12


def test_kl_and_free_energy():
    x = [np.array([0.5, -1.0])]
    assert bernoulli_kl(x, x) == pytest.approx(0.0, abs=1e-15)
    # p = sigmoid(1) against pi = 1/2, evaluated at 20 digits with mpmath
    assert bernoulli_kl([np.array([0.5])], [np.zeros(1)]) == pytest.approx(0.11094407167172735, abs=1e-14)
    assert free_energy(x, 4.2, [np.zeros(2)], 0.0) == 4.2


def test_map_weights():
    assert map_weights(np.array(0.0)) == 1.0
    np.testing.assert_array_equal(map_weights(np.array([-2.0, 0.3])), [-1.0, 1.0])
    logits = np.random.default_rng(0).normal(0, 3, 10_000)
    direct = np.where(2 * expit(2 * logits) - 1 >= 0, 1.0, -1.0)
    np.testing.assert_array_equal(map_weights(logits), direct)


def test_parameterization_round_trip():
    x = np.linspace(-10, 10, 2001)
    np.testing.assert_allclose(logits_from_means(mean_params(x)), x, atol=1e-9)
    assert np.all(np.abs(mean_params(x)) < 1)
    p =np.concatenate([np.geomspace(1e-6, 0.5, 500), 1 - np.geomspace(1e-6, 0.5, 500)])
    np.testing.assert_allclose(probabilities(logits_from_probabilities(p)), p, atol=1e-9)


@given(st.floats(-10, 10))
def test_means_and_probabilities_agree(x):
    assert probabilities(x) == pytest.approx((mean_params(x) + 1) / 2, abs=1e-12)


def test_sample_binary_saturated_and_uniform():
    rng = step_rng(0, 0)
    np.testing.assert_array_equal(sample_binary(np.array([np.inf, -np.inf]), rng), [1.0, -1.0])
    draws = sample_binary(np.zeros(100_000), rng)
    assert set(np.unique(draws)) == {-1.0, 1.0}
    assert abs(np.mean(draws)) < 0.02


def test_step_rng_streams_are_addressable():
    a = step_rng(5, 3).random(4)
    b = step_rng(5, 3).random(4)
    c = step_rng(5, 4).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
