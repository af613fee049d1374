"""
Diagonal-Gaussian variational family over a standard-normal prior.

Functions:
 - kl_to_standard_normal(lam): closed-form KL[q(z; λ) || N(0, I)]
 - sample_z(lam, seed): reparameterized draw z = μ + σ ⊙ ε
 - neg_elbo(lam, theta, x, seed, kl_multiplier): one stochastic −ELBO evaluation
 - elbo_loss(lam, theta, x, seed, kl_multiplier): −ELBO with ∇_λ and ∇_θ from one tape
 - gaussian_kl / gaussian_kl_grad: KL[q(z; ν) || q(z; ω)] and its gradient w.r.t. ν
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union
import logging

import numpy as np

from savae import autodiff as ad
from savae.autodiff import ModelParams, Tensor
from savae.errors import ShapeError

logger = logging.getLogger(__name__)

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0
LAMBDA_KEY = "lambda"


@dataclass(frozen=True)
class VarParams:
    """λ = [μ, log σ²]; arrays are (d,) for one example or (B, d) for a batch."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mu.shape != log_var.shape or mu.ndim not in (1, 2):
            raise ShapeError("VarParams", mu.shape, log_var.shape)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def batched(self) -> bool:
        return self.mu.ndim == 2

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_var], axis=-1)

    @classmethod
    def from_stacked(cls, lam: np.ndarray) -> "VarParams":
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape[-1] % 2:
            raise ShapeError("VarParams.from_stacked", lam.shape, ("2d",))
        d = lam.shape[-1] // 2
        return cls(lam[..., :d], lam[..., d:])

    @classmethod
    def prior(cls, dim: int, batch: Optional[int] = None) -> "VarParams":
        shape = (dim,) if batch is None else (batch, dim)
        return cls(np.zeros(shape), np.zeros(shape))

    def clamped(self) -> "VarParams":
        return VarParams(self.mu, np.clip(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def row(self, i: int) -> "VarParams":
        return VarParams(self.mu[i], self.log_var[i])


@dataclass
class ElboEval:
    """
    One stochastic −ELBO evaluation. Scalars are sums over the batch (per-example
    values for a single sequence); neg_elbo == recon_nll + kl_multiplier * kl exactly.
    """

    neg_elbo: float
    recon_nll: float
    kl: float
    noise_seed: int
    kl_multiplier: float
    recon_per_example: np.ndarray
    kl_per_example: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.recon_per_example.size)

    def per_example(self) -> np.ndarray:
        return self.recon_per_example + self.kl_multiplier * self.kl_per_example


@dataclass
class LossEval:
    """Loss value with gradients w.r.t. λ (shape of λ) and θ, evaluated under one seed."""

    value: float
    grad_lambda: np.ndarray
    grad_theta: ModelParams
    seed: int
    elbo: Optional[ElboEval] = None


def kl_tensor(mu: Tensor, log_var: Tensor) -> Tensor:
    """Per-row KL to N(0, I): 0.5 Σ (μ² + σ² − 1 − log σ²)."""
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(log_var)), ad.add(log_var, 1.0))
    return ad.scale(ad.sum(inner, axis=-1), 0.5)


def kl_to_standard_normal(lam: VarParams) -> float:
    mu, lv = lam.mu, lam.log_var
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv))


def sample_z(lam: VarParams, seed: int) -> np.ndarray:
    noise = ad.draw_noise(seed, lam.mu.shape)
    return ad.gaussian_sample(lam.mu, lam.log_var, noise=noise).data


def gaussian_kl(nu: VarParams, omega: VarParams) -> float:
    """KL[N(μ_ν, σ_ν²) || N(μ_ω, σ_ω²)] summed over dimensions (and batch rows)."""
    var_nu, var_om = np.exp(nu.log_var), np.exp(omega.log_var)
    diff = nu.mu - omega.mu
    return float(0.5 * np.sum(omega.log_var - nu.log_var + (var_nu + diff * diff) / var_om - 1.0))


def gaussian_kl_grad(nu: VarParams, omega: VarParams) -> np.ndarray:
    """∇_ν of gaussian_kl with ω held fixed, stacked as [∂/∂μ_ν, ∂/∂log σ_ν²]."""
    var_om = np.exp(omega.log_var)
    d_mu = (nu.mu - omega.mu) / var_om
    d_lv = 0.5 * (np.exp(nu.log_var) / var_om - 1.0)
    return np.concatenate([d_mu, d_lv], axis=-1)


def _as_batch(lam: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    lam = np.asarray(lam, dtype=np.float64)
    x = np.asarray(x, dtype=np.int64)
    single = lam.ndim == 1
    if single:
        lam = lam[None, :]
    if x.ndim == 1:
        x = x[None, :]
    if lam.shape[0] != x.shape[0]:
        raise ShapeError("neg_elbo (batch)", lam.shape, x.shape)
    return lam, x, single


def _elbo_fn(theta, x: np.ndarray, kl_multiplier: float, parts: Dict[str, Tensor]):
    # lazy import: models depends on this module for VarParams
    from savae.models import sequence_nll

    def f(p: Dict[str, Tensor]) -> Tensor:
        lam = p[LAMBDA_KEY]
        d = lam.shape[-1] // 2
        mu = ad.slice_axis(lam, 0, d)
        log_var = ad.slice_axis(lam, d, 2 * d)
        z = ad.gaussian_sample(mu, log_var)
        recon = sequence_nll(theta, p, x, z)
        kl = kl_tensor(mu, log_var)
        parts["recon"], parts["kl"] = recon, kl
        r, k = ad.sum(recon), ad.sum(kl)
        parts["r"], parts["k"] = r, k
        return ad.add(r, ad.scale(k, kl_multiplier))

    return f


def _inputs(lam: np.ndarray, theta) -> ModelParams:
    return ModelParams({LAMBDA_KEY: lam}).merge(theta.params)


def _elbo_eval(parts: Dict[str, Tensor], seed: int, kl_multiplier: float) -> ElboEval:
    r = float(parts["r"].data)
    k = float(parts["k"].data)
    return ElboEval(
        neg_elbo=r + kl_multiplier * k,
        recon_nll=r,
        kl=k,
        noise_seed=int(seed),
        kl_multiplier=float(kl_multiplier),
        recon_per_example=parts["recon"].data.copy(),
        kl_per_example=parts["kl"].data.copy(),
    )


def _check_multiplier(kl_multiplier: float) -> None:
    if not 0.0 <= kl_multiplier <= 1.0:
        raise ValueError(f"kl_multiplier must lie in [0, 1], got {kl_multiplier}")


def neg_elbo(lam: Union[VarParams, np.ndarray], theta, x, seed: int, kl_multiplier: float = 1.0) -> ElboEval:
    """Single-sample −ELBO = −log p(x | z; θ) + kl_multiplier · KL, z ~ q(z; λ) under `seed`."""
    _check_multiplier(kl_multiplier)
    arr = lam.stacked() if isinstance(lam, VarParams) else lam
    arr, xb, _ = _as_batch(arr, x)
    parts: Dict[str, Tensor] = {}
    ad.forward(_elbo_fn(theta, xb, kl_multiplier, parts), _inputs(arr, theta), seed)
    return _elbo_eval(parts, seed, kl_multiplier)


def elbo_loss(lam: np.ndarray, theta, x, seed: int, kl_multiplier: float = 1.0) -> LossEval:
    """
    −ELBO summed over the batch with ∇_λ (same shape as `lam`) and ∇_θ.
    This is the default loss of the SVI engine.
    """
    _check_multiplier(kl_multiplier)
    arr, xb, single = _as_batch(lam, x)
    parts: Dict[str, Tensor] = {}
    value, tape = ad.forward(_elbo_fn(theta, xb, kl_multiplier, parts), _inputs(arr, theta), seed)
    elbo = _elbo_eval(parts, seed, kl_multiplier)
    grads = ad.backward(tape)
    g_lam = grads[LAMBDA_KEY]
    return LossEval(
        value=value,
        grad_lambda=g_lam[0] if single else g_lam,
        grad_theta=grads.subset(theta.params.names()),
        seed=int(seed),
        elbo=elbo,
    )
