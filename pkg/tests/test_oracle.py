import math

import numpy as np

from savae.config import OracleSpec
from savae.models import gen_log_likelihood
from savae.oracle import build_oracle, importance_nll, sample_dataset, sample_split, true_nll_estimate
from savae.variational import VarParams


def small_spec(**kw):
    base = dict(vocab_size=6, embed_dim=3, hidden_dim=4, seq_len=3, latent_dim=2, n_train=20, n_val=10, n_test=10, seed=11)
    base.update(kw)
    return OracleSpec(**base)


def test_oracle_is_reproducible():
    assert build_oracle(small_spec()).params.equal(build_oracle(small_spec()).params)


def test_oracle_init_ranges():
    oracle = build_oracle(small_spec(vocab_size=100))
    wide = oracle.params["gen.out.w_z"]
    assert wide.size == 200
    assert np.abs(wide).max() > 1.0
    assert np.abs(wide).max() <= 5.0
    for name, value in oracle.params.items():
        if name != "gen.out.w_z":
            assert np.abs(value).max() <= 1.0, name


def test_dataset_sizes_and_determinism():
    spec = small_spec()
    oracle = build_oracle(spec)
    a, b = sample_dataset(oracle, spec), sample_dataset(oracle, spec)
    assert a.sizes() == {"train": 20, "val": 10, "test": 10}
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(a.as_matrix(name), b.as_matrix(name))
    assert all(len(s) == 3 for s in a.split("train"))


def test_uniform_oracle_token_frequency():
    oracle = build_oracle(small_spec(vocab_size=2))
    oracle = oracle.with_params(oracle.params.zeros_like())
    tokens = np.concatenate(sample_split(oracle, 40_000, 1, seed=3))
    assert abs(tokens.mean() - 0.5) < 0.01


def test_latent_free_oracle_estimate_is_exact():
    spec = small_spec()
    oracle = build_oracle(spec)
    oracle = oracle.with_params(oracle.params.replace(**{"gen.out.w_z": np.zeros((2, 6))}))
    data = sample_dataset(oracle, spec)
    exact = -np.mean([gen_log_likelihood(oracle, x, np.zeros(2)) for x in data.split("test")])
    assert math.isclose(true_nll_estimate(oracle, data, n_samples=50, seed=1), exact, rel_tol=0, abs_tol=1e-10)


def test_more_samples_tighten_estimate():
    spec = small_spec(seq_len=4)
    oracle = build_oracle(spec)
    x = sample_dataset(oracle, spec).split("test")[0]
    one = np.mean([importance_nll(oracle, x, None, 1, seed) for seed in range(200)])
    many = np.mean([importance_nll(oracle, x, None, 1000, seed) for seed in range(20)])
    assert many <= one


def test_prior_proposal_matches_default():
    spec = small_spec()
    oracle = build_oracle(spec)
    x = sample_dataset(oracle, spec).split("test")[0]
    a = importance_nll(oracle, x, None, 100, seed=4)
    b = importance_nll(oracle, x, VarParams.prior(2), 100, seed=4)
    assert math.isclose(a, b, rel_tol=1e-12)


def test_threads_do_not_change_estimate():
    spec = small_spec()
    oracle = build_oracle(spec)
    data = sample_dataset(oracle, spec)
    assert true_nll_estimate(oracle, data, 20, seed=2, threads=1) == true_nll_estimate(oracle, data, 20, seed=2, threads=3)


def test_estimate_approaches_quadrature():
    spec = small_spec(vocab_size=3, seq_len=2, latent_dim=1, wide_init=1.0)
    oracle = build_oracle(spec)
    x = np.array([1, 2])
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    lik = np.exp(gen_log_likelihood(oracle, np.tile(x, (nodes.size, 1)), nodes[:, None]))
    exact = -math.log(np.sum(weights * lik) / math.sqrt(2 * math.pi))
    assert abs(importance_nll(oracle, x, None, 100_000, seed=0) - exact) < 0.01
