"""
Stochastic variational inference with a differentiable unroll.

svi_forward runs K steps of momentum SGD on the negative ELBO w.r.t. λ, clipping each
step gradient. svi_backward walks the recorded trace in reverse and returns the total
derivative of the final loss w.r.t. λ₀ and θ, estimating every Hessian-vector product
by finite differences of gradients evaluated under the step's own seed.

Seed layout (children of the master seed):
 - (0,)   final loss evaluation at λ_K
 - (1, k) gradient evaluation at step k
 - (2,)   random initialization of λ₀ when no encoder is used

For a batch, λ has shape (B, 2d) and the loss is a sum of per-example terms, so each
row is an independent chain. Step gradients and λ̄ adjoints are clipped per row.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union
import logging

import numpy as np

from savae.autodiff import ModelParams
from savae.config import SviConfig
from savae.data_utils import derive_seed
from savae.errors import NonFiniteValue, TraceMismatch
from savae.variational import LOG_VAR_MAX, LOG_VAR_MIN, ElboEval, LossEval, VarParams, elbo_loss

logger = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray, object, object, int, float], LossEval]


def final_seed(master_seed: int) -> int:
    return derive_seed(master_seed, 0)


def step_seed(master_seed: int, k: int) -> int:
    return derive_seed(master_seed, 1, k)


def init_seed(master_seed: int) -> int:
    return derive_seed(master_seed, 2)


def random_init(batch: int, latent_dim: int, master_seed: int, std: float = 0.1) -> VarParams:
    """λ₀ with μ and log σ² drawn from N(0, std²)."""
    rng = np.random.default_rng(init_seed(master_seed))
    lam = rng.normal(0.0, std, size=(batch, 2 * latent_dim))
    return VarParams.from_stacked(lam)


def clip(u: np.ndarray, eta: float) -> np.ndarray:
    """(η/‖u‖)u when ‖u‖ > η, u otherwise."""
    if eta <= 0:
        raise ValueError("clip threshold must be positive")
    u = np.asarray(u, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    if norm > eta:
        return u * (eta / norm)
    return u


def clip_rows(u: np.ndarray, eta: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 2:
        return clip(u, eta)
    return np.stack([clip(row, eta) for row in u])


def clip_params(g: ModelParams, eta: float) -> ModelParams:
    norm = g.norm()
    if norm > eta:
        return g * (eta / norm)
    return g


def _clamp(lam: np.ndarray) -> np.ndarray:
    return VarParams.from_stacked(lam).clamped().stacked()


def _clamp_mask(lam: np.ndarray) -> np.ndarray:
    """Derivative of _clamp at lam: 1 where the value passes through, 0 where log σ² was clamped."""
    mask = np.ones_like(lam)
    d = lam.shape[-1] // 2
    log_var = lam[..., d:]
    mask[..., d:] = ((log_var >= LOG_VAR_MIN) & (log_var <= LOG_VAR_MAX)).astype(np.float64)
    return mask


def _as_array(lam: Union[VarParams, np.ndarray]) -> np.ndarray:
    if isinstance(lam, VarParams):
        return lam.stacked()
    return np.array(lam, dtype=np.float64)


@dataclass
class SviTrace:
    lambdas: List[np.ndarray]
    velocities: List[np.ndarray]
    step_seeds: List[int]
    final_seed: int
    step_evals: List[LossEval]
    final: LossEval
    cfg: SviConfig
    kl_multiplier: float
    master_seed: int
    # masks[k] is the clamp derivative applied when producing lambdas[k + 1]
    masks: List[np.ndarray] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.lambdas) - 1

    @property
    def final_eval(self) -> Optional[ElboEval]:
        return self.final.elbo

    def lambda_at(self, k: int) -> VarParams:
        return VarParams.from_stacked(self.lambdas[k])

    def shift(self) -> float:
        """Mean per-example ‖λ_K − λ₀‖."""
        diff = np.atleast_2d(self.lambdas[-1] - self.lambdas[0])
        return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass
class SviGradients:
    d_lambda0: np.ndarray
    d_theta: Optional[ModelParams]


def svi_forward(
    lambda0: Union[VarParams, np.ndarray],
    theta,
    x,
    cfg: SviConfig,
    kl_multiplier: float = 1.0,
    master_seed: int = 0,
    loss: LossFn = elbo_loss,
) -> SviTrace:
    lam = _as_array(lambda0)
    v = np.zeros_like(lam)
    lambdas, velocities, seeds, evals, masks = [lam], [v], [], [], []
    for k in range(cfg.steps):
        seed = step_seed(master_seed, k)
        try:
            ev = loss(lam, theta, x, seed, kl_multiplier)
        except NonFiniteValue as exc:
            raise exc.at_step(k) from exc
        v = cfg.momentum * v - clip_rows(ev.grad_lambda, cfg.clip)
        pre = lam + cfg.learning_rate * v
        masks.append(_clamp_mask(pre))
        lam = _clamp(pre)
        lambdas.append(lam)
        velocities.append(v)
        seeds.append(seed)
        evals.append(ev)
    fseed = final_seed(master_seed)
    try:
        final = loss(lam, theta, x, fseed, kl_multiplier)
    except NonFiniteValue as exc:
        raise exc.at_step(cfg.steps) from exc
    trace = SviTrace(lambdas, velocities, seeds, fseed, evals, final, cfg, float(kl_multiplier), int(master_seed), masks)
    logger.debug("svi_forward: K=%d loss %.4f -> %.4f", cfg.steps, evals[0].value if evals else final.value, final.value)
    return trace


def hvp(
    lambda_k: Union[VarParams, np.ndarray],
    theta,
    x,
    v: np.ndarray,
    eps: float,
    seed: int,
    kl_multiplier: float = 1.0,
    loss: LossFn = elbo_loss,
    base: Optional[LossEval] = None,
) -> Tuple[np.ndarray, ModelParams]:
    """
    (H_λλ f · v, H_θλ f · v) from one perturbed gradient evaluation at λ + εv.
    `base` is the unperturbed evaluation if already available; it must share `seed`.
    """
    lam = _as_array(lambda_k)
    if base is None:
        base = loss(lam, theta, x, seed, kl_multiplier)
    if base.seed != seed:
        raise TraceMismatch(f"hvp: base gradient used seed {base.seed}, expected {seed}")
    pert = loss(lam + eps * np.asarray(v, dtype=np.float64), theta, x, seed, kl_multiplier)
    h_lam = (pert.grad_lambda - base.grad_lambda) / eps
    h_theta = (pert.grad_theta - base.grad_theta) * (1.0 / eps)
    return h_lam, h_theta


def hvp_lambda(lambda_k, theta, x, v, eps, seed, kl_multiplier: float = 1.0, loss: LossFn = elbo_loss) -> np.ndarray:
    return hvp(lambda_k, theta, x, v, eps, seed, kl_multiplier, loss)[0]


def hvp_theta(lambda_k, theta, x, v, eps, seed, kl_multiplier: float = 1.0, loss: LossFn = elbo_loss) -> ModelParams:
    return hvp(lambda_k, theta, x, v, eps, seed, kl_multiplier, loss)[1]


def _check_trace(trace: SviTrace, cfg: SviConfig, kl_multiplier: float) -> None:
    if trace.cfg != cfg:
        raise TraceMismatch("trace was recorded with a different SviConfig")
    if trace.kl_multiplier != float(kl_multiplier):
        raise TraceMismatch(f"trace kl_multiplier {trace.kl_multiplier} != {kl_multiplier}")
    if not (len(trace.lambdas) == len(trace.velocities) == cfg.steps + 1 == len(trace.step_seeds) + 1):
        raise TraceMismatch("trace length does not match cfg.steps")


def svi_backward(
    trace: SviTrace,
    theta,
    x,
    cfg: SviConfig,
    kl_multiplier: float = 1.0,
    loss: LossFn = elbo_loss,
    with_theta: bool = True,
) -> SviGradients:
    """
    Reverse pass over the trace:
      λ̄ ← w_K ∇_λ f(λ_K), θ̄ ← w_K ∇_θ f(λ_K), v̄ ← 0
      for k = K−1 … 0:
        λ̄ ← λ̄ ⊙ m_{k+1}   (log σ² clamp derivative)
        v̄ ← v̄ + α λ̄
        λ̄ ← clip(λ̄ − H_λλ v̄ + w_k ∇_λ f(λ_k), η)
        θ̄ ← θ̄ − clip(H_θλ v̄, η_θ) + w_k ∇_θ f(λ_k)
        v̄ ← γ v̄
    The θ̄ Hessian term is clipped on its batch mean.
    """
    _check_trace(trace, cfg, kl_multiplier)
    w = cfg.weights()
    K = cfg.steps
    lam_bar = w[K] * trace.final.grad_lambda
    theta_bar = trace.final.grad_theta * w[K] if with_theta else None
    v_bar = np.zeros_like(lam_bar)
    batch = lam_bar.shape[0] if lam_bar.ndim == 2 else 1
    for k in range(K - 1, -1, -1):
        if trace.masks:
            lam_bar = lam_bar * trace.masks[k]
        v_bar = v_bar + cfg.learning_rate * lam_bar
        step = trace.step_evals[k]
        h_lam, h_theta = hvp(
            trace.lambdas[k], theta, x, v_bar, cfg.hvp_epsilon, trace.step_seeds[k],
            kl_multiplier, loss, base=step,
        )
        lam_bar = lam_bar - h_lam
        if w[k]:
            lam_bar = lam_bar + w[k] * step.grad_lambda
        lam_bar = clip_rows(lam_bar, cfg.clip)
        if with_theta:
            theta_bar = theta_bar - clip_params(h_theta * (1.0 / batch), cfg.theta_clip) * float(batch)
            if w[k]:
                theta_bar = theta_bar + step.grad_theta * w[k]
        v_bar = cfg.momentum * v_bar
    return SviGradients(d_lambda0=lam_bar, d_theta=theta_bar)
