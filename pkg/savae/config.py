"""
Declarative configuration models.

Every config is a pydantic model validated before any compute starts. Files may be
JSON or TOML; CLI flags override individual fields afterwards.
"""
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Type, TypeVar
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from savae.errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)


class Regime(str, Enum):
    VAE = "vae"
    SVI = "svi"
    VAE_SVI = "vae_svi"
    VAE_SVI_KL = "vae_svi_kl"
    SA_VAE = "sa_vae"

    @property
    def uses_encoder(self) -> bool:
        return self is not Regime.SVI


class SviConfig(BaseModel):
    """Inner refinement settings: K steps of momentum SGD on the negative ELBO."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(20, ge=0)
    learning_rate: float = Field(1.0, gt=0)
    momentum: float = Field(0.5, ge=0, lt=1)
    clip: float = Field(5.0, gt=0)
    hvp_epsilon: float = Field(1e-5, gt=0)
    # clip applied to the θ̄ Hessian-vector term only; None means `clip`
    hvp_clip: Optional[float] = Field(None, gt=0)
    # weights w_0..w_K of the objective Σ_k w_k f(λ_k); None means w_K = 1, others 0
    step_weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_weights(self) -> "SviConfig":
        if self.step_weights is not None:
            if len(self.step_weights) != self.steps + 1:
                raise ValueError(f"step_weights needs {self.steps + 1} entries, got {len(self.step_weights)}")
            if any(w < 0 or not math.isfinite(w) for w in self.step_weights):
                raise ValueError("step_weights must be finite and nonnegative")
        return self

    def weights(self) -> np.ndarray:
        if self.step_weights is None:
            w = np.zeros(self.steps + 1)
            w[-1] = 1.0
            return w
        return np.asarray(self.step_weights, dtype=np.float64)

    @property
    def theta_clip(self) -> float:
        return self.clip if self.hvp_clip is None else self.hvp_clip


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(50, ge=1)
    learning_rate: float = Field(1.0, gt=0)
    max_grad_norm: float = Field(5.0, gt=0)
    kl_start: float = Field(0.1, ge=0, le=1)
    kl_warmup_epochs: float = Field(10.0, ge=0)
    lr_decay_factor: float = Field(2.0, ge=1)
    decay_lock_epochs: int = Field(5, ge=0)


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(1000, ge=2)
    embed_dim: int = Field(100, ge=1)
    hidden_dim: int = Field(100, ge=1)
    latent_dim: int = Field(2, ge=1)
    enc_embed_dim: int = Field(100, ge=1)
    enc_hidden_dim: int = Field(100, ge=1)
    latent_mode: Literal["output", "hidden"] = "output"
    share_embeddings: bool = False
    init_range: float = Field(0.1, gt=0)
    forget_bias: float = 1.0

    @model_validator(mode="after")
    def _check_sharing(self) -> "ModelDims":
        if self.share_embeddings and self.enc_embed_dim != self.embed_dim:
            raise ValueError("share_embeddings requires enc_embed_dim == embed_dim")
        return self


class OracleSpec(BaseModel):
    """Synthetic oracle: LSTM generator with a latent-facing output block drawn wide."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(1000, ge=2)
    embed_dim: int = Field(100, ge=1)
    hidden_dim: int = Field(100, ge=1)
    seq_len: int = Field(5, ge=1)
    latent_dim: int = Field(2, ge=1)
    narrow_init: float = Field(1.0, gt=0)
    wide_init: float = Field(5.0, gt=0)
    n_train: int = Field(5000, ge=1)
    n_val: int = Field(5000, ge=1)
    n_test: int = Field(5000, ge=1)
    seed: int = 3435


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    regime: Regime = Regime.SA_VAE
    generator: Literal["oracle_fixed", "learned"] = "learned"
    svi: SviConfig = SviConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelDims = ModelDims()
    data_dir: str = "data/synthetic"
    oracle_checkpoint: Optional[str] = None
    seed: int = 3435
    eval_batch_size: int = Field(200, ge=1)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_generator(self) -> "TrainConfig":
        if self.generator == "oracle_fixed" and not self.oracle_checkpoint:
            raise ValueError("generator=oracle_fixed needs oracle_checkpoint")
        return self


class ExperimentConfig(BaseModel):
    """One-file description of the synthetic comparison run by `reproduce table1`."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    oracle: OracleSpec = OracleSpec()
    train: TrainConfig = TrainConfig()
    regimes: List[Regime] = [Regime.VAE, Regime.SVI, Regime.SA_VAE]
    columns: List[Literal["oracle_fixed", "learned"]] = ["oracle_fixed", "learned"]
    true_nll_samples: int = Field(1000, ge=1)


def load_config(path: str, model: Type[ModelT]) -> ModelT:
    """Load a JSON or TOML file into `model`, raising ConfigError on any problem."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix.lower() == ".toml":
            with open(p, "rb") as f:
                payload = tomllib.load(f)
        else:
            with open(p, "r", encoding="utf8") as f:
                payload = json.load(f)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return validate_config(payload, model)


def validate_config(payload: dict, model: Type[ModelT]) -> ModelT:
    try:
        return model.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def override(cfg: ModelT, **updates) -> ModelT:
    """Copy of cfg with non-None updates applied and re-validated."""
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    payload = cfg.model_dump()
    payload.update(updates)
    return validate_config(payload, type(cfg))
