"""
Training regimes, schedules and the epoch driver.

Step functions return gradients (averaged over the batch) instead of updating in
place, so regimes can be compared gradient for gradient; `apply_step` performs the
clipped SGD update.

Regimes:
 - vae:        φ, θ from the single-sample −ELBO at λ₀ = enc(x)
 - svi:        no encoder; λ₀ random, K SVI steps, θ from the partial gradient at λ_K
 - vae_svi:    θ from the partial gradient at λ_K, φ from the −ELBO at λ₀
 - vae_svi_kl: θ as vae_svi, φ from KL[q(λ₀) || q(λ_K)] with λ_K held fixed
 - sa_vae:     total derivative of the −ELBO at λ_K through the K steps
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import logging
import math

import numpy as np
import pandas as pd

from savae.autodiff import ModelParams
from savae.config import Regime, ScheduleConfig, SviConfig, TrainConfig
from savae.data_utils import (
    Dataset, append_metrics, derive_seed, load_checkpoint, make_batches, manifest_ref, save_checkpoint, write_json,
)
from savae.errors import ConfigError, EmptyInput, NonFiniteValue
from savae.models import SeqEncoder, SeqGenModel, encode, encoder_vjp
from savae.svi import final_seed, random_init, svi_backward, svi_forward
from savae.variational import ElboEval, elbo_loss, gaussian_kl_grad, neg_elbo

logger = logging.getLogger(__name__)

EVAL_MODES = ("encoder", "encoder_refine", "random_refine")
_STEP_KEY = 100
_EVAL_KEY = 200
_SHUFFLE_KEY = 300
_GEN_INIT_KEY = 400
_ENC_INIT_KEY = 401


@dataclass
class ModelBundle:
    gen: SeqGenModel
    enc: Optional[SeqEncoder]
    regime: Regime
    train_generator: bool = True

    def save(self, out_dir: Path, tag: str, manifest_dir: Optional[Path] = None) -> List[Path]:
        """Checkpoints point back at the run manifest in `manifest_dir` when given."""
        out_dir = Path(out_dir)
        extra = {"regime": self.regime.value}
        if manifest_dir is not None:
            extra["manifest"] = manifest_ref(out_dir, manifest_dir)
        paths = [save_checkpoint(out_dir / f"{tag}_gen.json", self.gen.params, {**self.gen.meta(), **extra})]
        if self.enc is not None:
            paths.append(save_checkpoint(out_dir / f"{tag}_enc.json", self.enc.params, {**self.enc.meta(), **extra}))
        return paths

    @classmethod
    def load(cls, out_dir: Path, tag: str = "final") -> "ModelBundle":
        out_dir = Path(out_dir)
        gen_params, gen_meta = load_checkpoint(out_dir / f"{tag}_gen.json")
        regime = Regime(gen_meta.get("regime", Regime.VAE.value))
        enc = None
        if regime.uses_encoder:
            enc_params, enc_meta = load_checkpoint(out_dir / f"{tag}_enc.json")
            enc = SeqEncoder.from_meta(enc_params, enc_meta)
        return cls(SeqGenModel.from_meta(gen_params, gen_meta), enc, regime)


def build_bundle(cfg: TrainConfig, vocab_size: int, oracle: Optional[SeqGenModel] = None) -> ModelBundle:
    dims = cfg.model
    if dims.vocab_size != vocab_size:
        raise ConfigError(f"model.vocab_size {dims.vocab_size} does not match the dataset vocabulary {vocab_size}")
    if cfg.generator == "oracle_fixed":
        if oracle is None:
            raise ValueError("oracle_fixed training needs the oracle generator")
        gen = oracle
    else:
        gen = SeqGenModel.init(
            vocab_size, dims.embed_dim, dims.hidden_dim, dims.latent_dim,
            seed=derive_seed(cfg.seed, _GEN_INIT_KEY), latent_mode=dims.latent_mode,
            init_range=dims.init_range, forget_bias=dims.forget_bias,
        )
    enc = None
    if cfg.regime.uses_encoder:
        enc = SeqEncoder.init(
            vocab_size, dims.enc_embed_dim, dims.enc_hidden_dim, gen.latent_dim,
            seed=derive_seed(cfg.seed, _ENC_INIT_KEY), share_embeddings=dims.share_embeddings,
            init_range=dims.init_range, forget_bias=dims.forget_bias,
        )
    return ModelBundle(gen, enc, cfg.regime, train_generator=cfg.generator == "learned")


@dataclass
class StepResult:
    elbo: ElboEval
    grad_theta: Optional[ModelParams]
    grad_phi: Optional[ModelParams]
    shift: float = 0.0

    @property
    def loss(self) -> float:
        return self.elbo.neg_elbo / self.elbo.batch_size


# ---------------------------------------------------------------------------
# regime steps
# ---------------------------------------------------------------------------

def _shared_gen(bundle: ModelBundle) -> Optional[SeqGenModel]:
    return bundle.gen if bundle.enc is not None and bundle.enc.share_embeddings else None


def _encode(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    return encode(bundle.enc, x, _shared_gen(bundle)).stacked()


def _finish(bundle: ModelBundle, x, elbo: ElboEval, grad_theta, cotangent, shift: float = 0.0) -> StepResult:
    """Average over the batch and pull the λ₀ adjoint back into the encoder."""
    scale = 1.0 / x.shape[0]
    grad_phi = None
    if cotangent is not None:
        grad_phi, shared = encoder_vjp(bundle.enc, x, cotangent, _shared_gen(bundle))
        grad_phi = grad_phi * scale
        if shared is not None and grad_theta is not None:
            grad_theta = grad_theta.add_into(shared)
    if grad_theta is not None:
        grad_theta = grad_theta * scale
    if not bundle.train_generator:
        grad_theta = None
    return StepResult(elbo, grad_theta, grad_phi, shift)


def train_step_vae(bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int) -> StepResult:
    lam0 = _encode(bundle, x)
    ev = elbo_loss(lam0, bundle.gen, x, final_seed(master_seed), kl_multiplier)
    return _finish(bundle, x, ev.elbo, ev.grad_theta, ev.grad_lambda)


def train_step_svi_only(
    bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int, svi: SviConfig
) -> StepResult:
    lam0 = random_init(x.shape[0], bundle.gen.latent_dim, master_seed)
    trace = svi_forward(lam0, bundle.gen, x, svi, kl_multiplier, master_seed)
    return _finish(bundle, x, trace.final.elbo, trace.final.grad_theta, None, trace.shift())


def train_step_vae_svi(
    bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int, svi: SviConfig
) -> StepResult:
    lam0 = _encode(bundle, x)
    trace = svi_forward(lam0, bundle.gen, x, svi, kl_multiplier, master_seed)
    at_init = trace.final if svi.steps == 0 else elbo_loss(lam0, bundle.gen, x, final_seed(master_seed), kl_multiplier)
    return _finish(bundle, x, trace.final.elbo, trace.final.grad_theta, at_init.grad_lambda, trace.shift())


def train_step_vae_svi_kl(
    bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int, svi: SviConfig
) -> StepResult:
    lam0 = _encode(bundle, x)
    trace = svi_forward(lam0, bundle.gen, x, svi, kl_multiplier, master_seed)
    cot = gaussian_kl_grad(trace.lambda_at(0), trace.lambda_at(svi.steps))
    return _finish(bundle, x, trace.final.elbo, trace.final.grad_theta, cot, trace.shift())


def train_step_sa_vae(
    bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int, svi: SviConfig
) -> StepResult:
    lam0 = _encode(bundle, x)
    trace = svi_forward(lam0, bundle.gen, x, svi, kl_multiplier, master_seed)
    grads = svi_backward(trace, bundle.gen, x, svi, kl_multiplier, with_theta=bundle.train_generator)
    return _finish(bundle, x, trace.final.elbo, grads.d_theta, grads.d_lambda0, trace.shift())


def train_step(bundle: ModelBundle, x: np.ndarray, kl_multiplier: float, master_seed: int, svi: SviConfig) -> StepResult:
    if bundle.regime is Regime.VAE:
        return train_step_vae(bundle, x, kl_multiplier, master_seed)
    step = {
        Regime.SVI: train_step_svi_only,
        Regime.VAE_SVI: train_step_vae_svi,
        Regime.VAE_SVI_KL: train_step_vae_svi_kl,
        Regime.SA_VAE: train_step_sa_vae,
    }[bundle.regime]
    return step(bundle, x, kl_multiplier, master_seed, svi)


def sgd_update(params: ModelParams, grad: ModelParams, lr: float, max_grad_norm: float) -> ModelParams:
    """params − lr · g, with g rescaled to global norm max_grad_norm when larger."""
    norm = grad.norm()
    if not math.isfinite(norm):
        raise NonFiniteValue("gradient norm")
    if norm > max_grad_norm:
        grad = grad * (max_grad_norm / norm)
    return params - grad * lr


def apply_step(bundle: ModelBundle, result: StepResult, lr: float, max_grad_norm: float) -> ModelBundle:
    gen, enc = bundle.gen, bundle.enc
    if result.grad_theta is not None:
        gen = gen.with_params(sgd_update(gen.params, result.grad_theta, lr, max_grad_norm))
    if result.grad_phi is not None and enc is not None:
        enc = enc.with_params(sgd_update(enc.params, result.grad_phi, lr, max_grad_norm))
    return ModelBundle(gen, enc, bundle.regime, bundle.train_generator)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def kl_multiplier(batch_index: int, batches_per_epoch: int, schedule: ScheduleConfig) -> float:
    """Linear warm-up from kl_start to 1 over kl_warmup_epochs, advanced per batch."""
    if schedule.kl_warmup_epochs <= 0:
        return 1.0
    span = schedule.kl_warmup_epochs * batches_per_epoch
    return min(1.0, schedule.kl_start + (1.0 - schedule.kl_start) * batch_index / span)


class LrSchedule:
    """
    Keeps the initial rate through the lock epochs. After the first later epoch whose
    validation loss does not improve on the best so far, divides the rate by the decay
    factor at the end of every epoch.
    """

    def __init__(self, schedule: ScheduleConfig):
        self.lr = schedule.learning_rate
        self.factor = schedule.lr_decay_factor
        self.lock = schedule.decay_lock_epochs
        self.best = math.inf
        self.decaying = False

    def step(self, epoch: int, val_loss: float) -> float:
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
        if epoch <= self.lock:
            return self.lr
        if not improved and not self.decaying:
            logger.info("validation did not improve at epoch %d; decaying lr from now on", epoch)
            self.decaying = True
        if self.decaying:
            self.lr = self.lr / self.factor
        return self.lr


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def default_eval_mode(regime: Regime) -> str:
    if regime is Regime.VAE:
        return "encoder"
    if regime is Regime.SVI:
        return "random_refine"
    return "encoder_refine"


def _eval_batch(bundle: ModelBundle, x: np.ndarray, mode: str, svi: SviConfig, seed: int) -> ElboEval:
    if mode == "random_refine":
        lam0 = random_init(x.shape[0], bundle.gen.latent_dim, seed)
    else:
        lam0 = _encode(bundle, x)
    if mode == "encoder":
        return neg_elbo(lam0, bundle.gen, x, final_seed(seed), 1.0)
    return svi_forward(lam0, bundle.gen, x, svi, 1.0, seed).final_eval


def evaluate_examples(
    bundle: ModelBundle,
    seqs: Sequence[np.ndarray],
    mode: str = "encoder",
    svi: Optional[SviConfig] = None,
    steps: Optional[int] = None,
    seed: int = 0,
    batch_size: int = 200,
    threads: int = 1,
) -> pd.DataFrame:
    """Per-example neg_elbo, recon, kl and length at full KL weight."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if mode != "random_refine" and bundle.enc is None:
        raise ValueError(f"mode {mode!r} needs an encoder; regime {bundle.regime.value} has none")
    svi = svi or SviConfig()
    if steps is not None:
        svi = svi.model_copy(update={"steps": int(steps), "step_weights": None})
    seqs = list(seqs)
    if not seqs:
        raise EmptyInput("no sequences to evaluate")
    batches = make_batches(seqs, batch_size)

    def one(i: int) -> pd.DataFrame:
        x = batches[i]
        ev = _eval_batch(bundle, x, mode, svi, derive_seed(seed, _EVAL_KEY, i))
        return pd.DataFrame({
            "neg_elbo": ev.per_example(),
            "recon": ev.recon_per_example,
            "kl": ev.kl_per_example,
            "tokens": np.full(x.shape[0], x.shape[1]),
        })

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(one, range(len(batches))))
    else:
        frames = [one(i) for i in range(len(batches))]
    return pd.concat(frames, ignore_index=True)


def summarize(frame: pd.DataFrame) -> Dict[str, float]:
    tokens = int(frame["tokens"].sum())
    return {
        "neg_elbo": float(frame["neg_elbo"].mean()),
        "recon": float(frame["recon"].mean()),
        "kl": float(frame["kl"].mean()),
        "ppl": float(np.exp(frame["neg_elbo"].sum() / tokens)) if tokens else float("nan"),
        "examples": int(len(frame)),
        "tokens": tokens,
    }


def evaluate(bundle: ModelBundle, seqs: Sequence[np.ndarray], mode: str = "encoder", **kwargs) -> Dict[str, float]:
    """Mean −ELBO, reconstruction and KL per example, and exp(total −ELBO / tokens)."""
    return summarize(evaluate_examples(bundle, seqs, mode, **kwargs))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    history: pd.DataFrame
    files: List[Path] = field(default_factory=list)


def _row(epoch: int, split: str, metrics: Dict[str, float], lr: float, m: float) -> Dict[str, object]:
    return {
        "epoch": epoch, "split": split, "neg_elbo": metrics["neg_elbo"], "recon": metrics["recon"],
        "kl": metrics["kl"], "lr": lr, "kl_multiplier": m,
    }


def train(cfg: TrainConfig, bundle: ModelBundle, data: Dataset, out_dir: Path) -> TrainResult:
    """
    Fixed epoch budget; metrics CSV and checkpoints are written under out_dir.
    Both refer to out_dir/manifest.json, which the caller writes.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    metrics_path = out_dir / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    sched = cfg.schedule
    lr_sched = LrSchedule(sched)
    mode = default_eval_mode(bundle.regime)
    train_seqs, val_seqs = data.split("train"), data.split("val")
    files: List[Path] = [metrics_path, write_json(out_dir / "metrics.json", {
        "artifact": metrics_path.name, "manifest": manifest_ref(out_dir, out_dir), "regime": bundle.regime.value,
    })]
    if not bundle.train_generator and bundle.enc is None:
        logger.warning("regime %s with a fixed generator has nothing to train; evaluating only", bundle.regime.value)
    global_batch = 0
    history = pd.DataFrame()
    for epoch in range(1, sched.epochs + 1):
        batches = make_batches(train_seqs, sched.batch_size, seed=derive_seed(cfg.seed, _SHUFFLE_KEY, epoch))
        lr = lr_sched.lr
        sums = {"neg_elbo": 0.0, "recon": 0.0, "kl": 0.0}
        count, shifts, m = 0, [], 1.0
        for x in batches:
            m = kl_multiplier(global_batch, len(batches), sched)
            try:
                result = train_step(bundle, x, m, derive_seed(cfg.seed, _STEP_KEY, global_batch), cfg.svi)
                bundle = apply_step(bundle, result, lr, sched.max_grad_norm)
            except NonFiniteValue:
                files.extend(bundle.save(ckpt_dir, f"abort_epoch{epoch:03d}", out_dir))
                logger.error("non-finite value in epoch %d batch %d; checkpoint saved", epoch, global_batch)
                raise
            ev = result.elbo
            sums["neg_elbo"] += float(np.sum(ev.recon_per_example + ev.kl_per_example))
            sums["recon"] += ev.recon_nll
            sums["kl"] += ev.kl
            count += ev.batch_size
            shifts.append(result.shift)
            global_batch += 1
            logger.debug("epoch %d batch %d loss %.4f m=%.3f", epoch, global_batch, result.loss, m)
        train_metrics = {k: v / max(count, 1) for k, v in sums.items()}
        val_metrics = evaluate(
            bundle, val_seqs, mode, svi=cfg.svi, seed=derive_seed(cfg.seed, _EVAL_KEY),
            batch_size=cfg.eval_batch_size, threads=cfg.threads,
        )
        history = append_metrics(metrics_path, [
            _row(epoch, "train", train_metrics, lr, m),
            _row(epoch, "val", val_metrics, lr, m),
        ])
        files.extend(bundle.save(ckpt_dir, f"epoch{epoch:03d}", out_dir))
        logger.info(
            "epoch %d: train %.4f val %.4f (kl %.4f) lr %.4g m %.3f shift %.4f",
            epoch, train_metrics["neg_elbo"], val_metrics["neg_elbo"], val_metrics["kl"], lr, m,
            float(np.mean(shifts)) if shifts else 0.0,
        )
        lr_sched.step(epoch, val_metrics["neg_elbo"])
    files.extend(bundle.save(out_dir, "final", out_dir))
    return TrainResult(bundle, history, files)
