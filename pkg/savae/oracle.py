"""
Synthetic oracle: a randomly initialized LSTM generator used to produce ground-truth
data, plus Monte-Carlo estimates of −log p(x) under it.

Functions:
 - build_oracle(spec): generator with all weights U(−narrow, narrow) except the
   latent-to-output block, drawn U(−wide, wide)
 - sample_dataset(oracle, spec): fresh z ~ N(0, I) per example, ancestral tokens
 - importance_nll(gen, x, q, n_samples, seed): −log p(x) by importance sampling from q
 - true_nll_estimate(oracle, data, n_samples): mean −log p(x) with the prior as proposal
"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Union
import logging
import math

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from savae.autodiff import ModelParams
from savae.config import OracleSpec
from savae.data_utils import SPLITS, Dataset, derive_seed
from savae.models import SeqGenModel, gen_log_likelihood, sample_sequences
from savae.variational import VarParams

logger = logging.getLogger(__name__)

LATENT_BLOCK = "gen.out.w_z"
_ORACLE_KEY = 10
_SAMPLE_KEY = 20
_NLL_KEY = 30


def build_oracle(spec: OracleSpec) -> SeqGenModel:
    template = SeqGenModel.init(
        spec.vocab_size, spec.embed_dim, spec.hidden_dim, spec.latent_dim, seed=0, latent_mode="output"
    )
    rng = np.random.default_rng(derive_seed(spec.seed, _ORACLE_KEY))
    drawn = {}
    for name, value in template.params.items():
        bound = spec.wide_init if name == LATENT_BLOCK else spec.narrow_init
        drawn[name] = rng.uniform(-bound, bound, size=value.shape)
    logger.info(
        "built oracle V=%d H=%d d=%d (%d parameters, seed %d)",
        spec.vocab_size, spec.hidden_dim, spec.latent_dim, template.params.total_dim, spec.seed,
    )
    return template.with_params(ModelParams(drawn))


def sample_split(oracle: SeqGenModel, n: int, length: int, seed: int, temperature: float = 1.0) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, oracle.latent_dim))
    tokens = sample_sequences(oracle, z, length, rng, temperature)
    return [row.copy() for row in tokens]


def sample_dataset(oracle: SeqGenModel, spec: OracleSpec) -> Dataset:
    """Every split is drawn from its own child seed, so split sizes never interact."""
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    splits = {}
    for i, name in enumerate(SPLITS):
        splits[name] = sample_split(oracle, sizes[name], spec.seq_len, derive_seed(spec.seed, _SAMPLE_KEY, i))
    meta = {"seed": spec.seed, "seq_len": spec.seq_len, "source": "oracle"}
    return Dataset(splits=splits, vocab_size=oracle.vocab_size, meta=meta)


def _log_normal(z: np.ndarray, mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    return norm.logpdf(z, loc=mu, scale=np.exp(0.5 * log_var)).sum(axis=-1)


def importance_nll(
    gen: SeqGenModel,
    x: np.ndarray,
    q: Optional[VarParams] = None,
    n_samples: int = 1000,
    seed: int = 0,
) -> float:
    """
    −log (1/S) Σ_s p(x | z_s) p(z_s) / q(z_s) with z_s ~ q, for one sequence x of shape (T,).
    q=None samples from the prior, so the weights reduce to p(x | z_s).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.int64)
    d = gen.latent_dim
    eps = np.random.default_rng(seed).standard_normal((n_samples, d))
    if q is None:
        z = eps
        log_ratio = 0.0
    else:
        mu, lv = np.broadcast_to(q.mu, (n_samples, d)), np.broadcast_to(q.log_var, (n_samples, d))
        z = mu + np.exp(0.5 * lv) * eps
        log_ratio = _log_normal(z, np.zeros_like(z), np.zeros_like(z)) - _log_normal(z, mu, lv)
    xs = np.broadcast_to(x, (n_samples, x.size))
    log_w = gen_log_likelihood(gen, xs, z) + log_ratio
    return float(-(logsumexp(log_w) - math.log(n_samples)))


def true_nll_estimate(
    oracle: SeqGenModel,
    data: Union[Dataset, Sequence[np.ndarray]],
    n_samples: int = 1000,
    seed: int = 0,
    split: str = "test",
    threads: int = 1,
) -> float:
    """Mean over examples of the prior-proposal estimate; example i uses child seed i."""
    seqs = data.split(split) if isinstance(data, Dataset) else list(data)
    if not seqs:
        raise ValueError("no sequences to evaluate")

    def one(i: int) -> float:
        return importance_nll(oracle, seqs[i], None, n_samples, derive_seed(seed, _NLL_KEY, i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, range(len(seqs))))
    else:
        values = [one(i) for i in range(len(seqs))]
    estimate = float(np.mean(values))
    logger.info("true NLL estimate over %d sequences (S=%d): %.4f", len(seqs), n_samples, estimate)
    return estimate
