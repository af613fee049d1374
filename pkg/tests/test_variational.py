import math

import numpy as np
import pytest

from savae.oracle import importance_nll
from savae.variational import (
    VarParams, elbo_loss, gaussian_kl, gaussian_kl_grad, kl_to_standard_normal, neg_elbo, sample_z,
)


def test_kl_of_prior_is_zero():
    assert kl_to_standard_normal(VarParams.prior(3)) == 0.0


def test_kl_hand_value():
    lam = VarParams(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert math.isclose(kl_to_standard_normal(lam), 0.5, rel_tol=1e-12)


@pytest.mark.parametrize("mu, log_var, expected", [
    (1.0, 0.0, 0.5),
    (0.0, math.log(4.0), 0.5 * (3.0 - math.log(4.0))),
])
def test_kl_to_standard_normal_matches_monte_carlo(mu, log_var, expected):
    lam = VarParams(np.array([mu]), np.array([log_var]))
    assert math.isclose(kl_to_standard_normal(lam), expected, rel_tol=1e-12)
    n = 1_000_000
    z = mu + math.exp(0.5 * log_var) * np.random.default_rng(1).standard_normal(n)
    diff = -0.5 * (log_var + (z - mu) ** 2 / math.exp(log_var)) + 0.5 * z ** 2
    se = diff.std() / math.sqrt(n)
    assert abs(diff.mean() - expected) < 4 * se


def test_sample_z_deterministic_limit():
    lam = VarParams(np.array([0.3, -0.7]), np.array([-40.0, -40.0]))
    np.testing.assert_array_equal(sample_z(lam, seed=5), lam.mu)


def test_sample_z_reproducible():
    lam = VarParams(np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(sample_z(lam, 3), sample_z(lam, 3))


def test_neg_elbo_decomposes(tiny_gen, tiny_batch):
    rng = np.random.default_rng(0)
    lam = VarParams(rng.normal(size=(3, 2)), rng.normal(0, 0.3, size=(3, 2)))
    ev = neg_elbo(lam, tiny_gen, tiny_batch, seed=4, kl_multiplier=0.4)
    assert ev.neg_elbo == ev.recon_nll + 0.4 * ev.kl
    assert ev.batch_size == 3
    assert math.isclose(ev.kl, kl_to_standard_normal(lam), rel_tol=1e-12)
    zero = neg_elbo(lam, tiny_gen, tiny_batch, seed=4, kl_multiplier=0.0)
    assert zero.neg_elbo == zero.recon_nll
    assert zero.recon_nll == ev.recon_nll


def test_neg_elbo_rejects_bad_multiplier(tiny_gen, tiny_batch):
    with pytest.raises(ValueError):
        neg_elbo(VarParams.prior(2, 3), tiny_gen, tiny_batch, seed=0, kl_multiplier=1.5)


def test_elbo_loss_value_matches_neg_elbo(tiny_gen, tiny_batch):
    lam = VarParams.prior(2, 3)
    loss = elbo_loss(lam.stacked(), tiny_gen, tiny_batch, seed=9, kl_multiplier=0.7)
    ev = neg_elbo(lam, tiny_gen, tiny_batch, seed=9, kl_multiplier=0.7)
    assert math.isclose(loss.value, ev.neg_elbo, rel_tol=1e-12)
    assert loss.grad_lambda.shape == (3, 4)
    assert set(loss.grad_theta.names()) == set(tiny_gen.params.names())


def test_elbo_loss_gradients_match_finite_differences(tiny_gen, tiny_batch):
    rng = np.random.default_rng(1)
    lam = rng.normal(0, 0.5, size=(3, 4))
    seed, h = 12, 1e-6
    loss = elbo_loss(lam, tiny_gen, tiny_batch, seed)
    fd = np.zeros_like(lam)
    for idx in np.ndindex(lam.shape):
        plus, minus = lam.copy(), lam.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (elbo_loss(plus, tiny_gen, tiny_batch, seed).value - elbo_loss(minus, tiny_gen, tiny_batch, seed).value) / (2 * h)
    np.testing.assert_allclose(loss.grad_lambda, fd, rtol=1e-5, atol=1e-7)

    for name in ("gen.out.w_z", "gen.lstm.w_h", "gen.embed"):
        value = tiny_gen.params[name]
        for idx in list(np.ndindex(value.shape))[:6]:
            plus, minus = value.copy(), value.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = elbo_loss(lam, tiny_gen.with_params(tiny_gen.params.replace(**{name: plus})), tiny_batch, seed).value
            fm = elbo_loss(lam, tiny_gen.with_params(tiny_gen.params.replace(**{name: minus})), tiny_batch, seed).value
            assert math.isclose(loss.grad_theta[name][idx], (fp - fm) / (2 * h), rel_tol=1e-5, abs_tol=1e-7)


def test_mean_neg_elbo_bounds_importance_estimate(tiny_gen):
    x = np.array([0, 1, 2, 3])
    rng = np.random.default_rng(3)
    for trial in range(3):
        lam = VarParams(rng.normal(size=2), rng.normal(0, 0.3, size=2))
        draws = np.array([neg_elbo(lam, tiny_gen, x, seed=100 * trial + s).neg_elbo for s in range(200)])
        se = draws.std() / math.sqrt(draws.size)
        assert draws.mean() >= importance_nll(tiny_gen, x, n_samples=5000, seed=trial) - 3 * se


def test_single_example_lambda(tiny_gen):
    x = np.array([0, 1, 2, 3])
    loss = elbo_loss(np.zeros(4), tiny_gen, x, seed=0)
    assert loss.grad_lambda.shape == (4,)


def test_gaussian_kl_zero_at_equality():
    nu = VarParams(np.array([0.2, -1.0]), np.array([0.1, -0.5]))
    assert gaussian_kl(nu, nu) == 0.0
    np.testing.assert_array_equal(gaussian_kl_grad(nu, nu), np.zeros(4))


def test_gaussian_kl_gradient_direction():
    nu = VarParams(np.array([0.0]), np.array([0.0]))
    omega = VarParams(np.array([1.0]), np.array([0.0]))
    grad = gaussian_kl_grad(nu, omega)
    assert grad[0] == -1.0
    assert grad[1] == 0.0


def test_gaussian_kl_matches_monte_carlo():
    nu = VarParams(np.array([0.3, -0.2]), np.array([-0.4, 0.2]))
    omega = VarParams(np.array([-0.1, 0.5]), np.array([0.3, -0.3]))
    rng = np.random.default_rng(0)
    n = 1_000_000
    z = nu.mu + np.exp(0.5 * nu.log_var) * rng.standard_normal((n, 2))

    def log_q(lam):
        return -0.5 * np.sum(np.log(2 * np.pi) + lam.log_var + (z - lam.mu) ** 2 / np.exp(lam.log_var), axis=1)

    diff = log_q(nu) - log_q(omega)
    se = diff.std() / math.sqrt(n)
    assert abs(diff.mean() - gaussian_kl(nu, omega)) < 3 * se
