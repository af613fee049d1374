"""
LSTM sequence models: the generative model p(x | z; θ) and the inference network enc(x; φ).

Functions:
 - lstm_step: one single-layer LSTM update (gates i, f, g, o)
 - token_nll / sequence_nll: −log p(x_t | x_<t, z) per token / per sequence
 - gen_log_likelihood: Σ_t log p(x_t | x_<t, z; θ) on plain arrays
 - sample_sequences: ancestral sampling with an optional temperature
 - encode: λ₀ = enc(x; φ)
 - encoder_vjp: pulls an adjoint on λ₀ back to φ (and to a shared embedding table)

The generator reads a start symbol (id = vocab_size) before the first token, so the
model defines a proper distribution over all length-T sequences.
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Tuple, Union
import logging

import numpy as np
from scipy.special import softmax

from savae import autodiff as ad
from savae.autodiff import ModelParams, Tensor
from savae.errors import EmptyInput, ShapeError, VocabError
from savae.variational import VarParams

logger = logging.getLogger(__name__)

Params = Mapping[str, Union[Tensor, np.ndarray]]


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def _lstm_params(rng, prefix: str, in_dim: int, hidden: int, bound: float, forget_bias: float) -> Dict[str, np.ndarray]:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return {
        f"{prefix}.w_x": _uniform(rng, (in_dim, 4 * hidden), bound),
        f"{prefix}.w_h": _uniform(rng, (hidden, 4 * hidden), bound),
        f"{prefix}.b": b,
    }


def _get(p: Params, params: ModelParams, name: str) -> Tensor:
    value = p.get(name) if p else None
    if value is None:
        return Tensor(params[name])
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_tokens(x: np.ndarray, vocab_size: int) -> np.ndarray:
    x = np.asarray(x)
    if x.size and not np.issubdtype(x.dtype, np.integer):
        raise VocabError(f"tokens must be integers, got {x.dtype}")
    x = x.astype(np.int64)
    if x.size and (x.min() < 0 or x.max() >= vocab_size):
        raise VocabError(f"token outside [0, {vocab_size}): min {x.min()}, max {x.max()}")
    return x


def lstm_step(x_t: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    hidden = w_h.shape[0]
    gates = ad.add(ad.add(ad.matmul(x_t, w_x), ad.matmul(h, w_h)), b)
    i = ad.sigmoid(ad.slice_axis(gates, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(gates, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_axis(gates, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_axis(gates, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


@dataclass(frozen=True)
class SeqGenModel:
    """
    Generative LSTM. latent_mode="output": z is concatenated with h_t in the output
    affine layer at every step. latent_mode="hidden": h₀ = affine(z) and z is appended
    to every LSTM input.
    """

    params: ModelParams
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    latent_dim: int
    latent_mode: str = "output"

    @classmethod
    def init(
        cls,
        vocab_size: int,
        embed_dim: int,
        hidden_dim: int,
        latent_dim: int,
        seed: int = 0,
        latent_mode: str = "output",
        init_range: float = 0.1,
        forget_bias: float = 1.0,
    ) -> "SeqGenModel":
        if latent_mode not in ("output", "hidden"):
            raise ValueError(f"unknown latent_mode {latent_mode!r}")
        rng = np.random.default_rng(seed)
        in_dim = embed_dim + (latent_dim if latent_mode == "hidden" else 0)
        p = {"gen.embed": _uniform(rng, (vocab_size + 1, embed_dim), init_range)}
        p.update(_lstm_params(rng, "gen.lstm", in_dim, hidden_dim, init_range, forget_bias))
        p["gen.out.w_h"] = _uniform(rng, (hidden_dim, vocab_size), init_range)
        if latent_mode == "output":
            p["gen.out.w_z"] = _uniform(rng, (latent_dim, vocab_size), init_range)
        else:
            p["gen.init.w"] = _uniform(rng, (latent_dim, hidden_dim), init_range)
            p["gen.init.b"] = np.zeros(hidden_dim)
        p["gen.out.b"] = np.zeros(vocab_size)
        return cls(ModelParams(p), vocab_size, embed_dim, hidden_dim, latent_dim, latent_mode)

    def with_params(self, params: ModelParams) -> "SeqGenModel":
        return replace(self, params=params)

    def meta(self) -> Dict[str, object]:
        return {
            "kind": "generator",
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "latent_dim": self.latent_dim,
            "latent_mode": self.latent_mode,
        }

    @classmethod
    def from_meta(cls, params: ModelParams, meta: Mapping) -> "SeqGenModel":
        return cls(
            params, int(meta["vocab_size"]), int(meta["embed_dim"]), int(meta["hidden_dim"]),
            int(meta["latent_dim"]), str(meta.get("latent_mode", "output")),
        )


def _logits_steps(gen: SeqGenModel, p: Params, inputs: List[np.ndarray], z: Tensor):
    """Yields the output logits after reading each input id."""
    params = gen.params
    batch = z.shape[0]
    embed = _get(p, params, "gen.embed")
    w_x, w_h, b = (_get(p, params, f"gen.lstm.{n}") for n in ("w_x", "w_h", "b"))
    out_w, out_b = _get(p, params, "gen.out.w_h"), _get(p, params, "gen.out.b")
    hidden_mode = gen.latent_mode == "hidden"
    if hidden_mode:
        h = ad.add(ad.matmul(z, _get(p, params, "gen.init.w")), _get(p, params, "gen.init.b"))
        z_proj = None
    else:
        h = Tensor(np.zeros((batch, gen.hidden_dim)))
        z_proj = ad.matmul(z, _get(p, params, "gen.out.w_z"))
    c = Tensor(np.zeros((batch, gen.hidden_dim)))
    for ids in inputs:
        e = ad.embedding_lookup(embed, ids)
        if hidden_mode:
            e = ad.concat([e, z], axis=-1)
        h, c = lstm_step(e, h, c, w_x, w_h, b)
        logits = ad.add(ad.matmul(h, out_w), out_b)
        if z_proj is not None:
            logits = ad.add(logits, z_proj)
        yield logits


def _batch_inputs(gen: SeqGenModel, x, z) -> Tuple[np.ndarray, Tensor]:
    x = _check_tokens(x, gen.vocab_size)
    if x.ndim == 1:
        x = x[None, :]
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim == 1:
        z = ad.reshape(z, (1, -1))
    if z.shape != (x.shape[0], gen.latent_dim):
        raise ShapeError("generator latent", z.shape, (x.shape[0], gen.latent_dim))
    return x, z


def token_nll(gen: SeqGenModel, p: Params, x, z) -> Tensor:
    """(B, T) tensor of −log p(x_t | x_<t, z; θ); `p` overrides parameters with taped leaves."""
    x, z = _batch_inputs(gen, x, z)
    batch, length = x.shape
    if length == 0:
        raise EmptyInput("generator needs at least one token")
    bos = np.full(batch, gen.vocab_size, dtype=np.int64)
    inputs = [bos] + [x[:, t] for t in range(length - 1)]
    cols = []
    for t, logits in enumerate(_logits_steps(gen, p, inputs, z)):
        nll = ad.softmax_cross_entropy(logits, x[:, t])
        cols.append(ad.reshape(nll, (batch, 1)))
    return ad.concat(cols, axis=1)


def sequence_nll(gen: SeqGenModel, p: Params, x, z) -> Tensor:
    return ad.sum(token_nll(gen, p, x, z), axis=1)


def gen_log_likelihood(theta: SeqGenModel, x, z) -> Union[float, np.ndarray]:
    """log p(x | z; θ): a float for one sequence, an array of shape (B,) for a batch."""
    single = np.asarray(x).ndim == 1
    ll = -sequence_nll(theta, {}, x, z).data
    return float(ll[0]) if single else ll


def token_log_probs(theta: SeqGenModel, x, z) -> np.ndarray:
    return -token_nll(theta, {}, x, z).data


def sample_sequences(
    gen: SeqGenModel, z: np.ndarray, length: int, rng: np.random.Generator, temperature: float = 1.0
) -> np.ndarray:
    """Ancestral sampling of (N, length) token ids given latents z of shape (N, d)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = z.shape[0]
    out = np.zeros((n, length), dtype=np.int64)
    params = gen.params
    zt = Tensor(z)
    hidden_mode = gen.latent_mode == "hidden"
    if hidden_mode:
        h = ad.add(ad.matmul(zt, Tensor(params["gen.init.w"])), Tensor(params["gen.init.b"]))
    else:
        h = Tensor(np.zeros((n, gen.hidden_dim)))
        z_proj = z @ params["gen.out.w_z"]
    c = Tensor(np.zeros((n, gen.hidden_dim)))
    w = [Tensor(params[f"gen.lstm.{k}"]) for k in ("w_x", "w_h", "b")]
    ids = np.full(n, gen.vocab_size, dtype=np.int64)
    for t in range(length):
        e = Tensor(params["gen.embed"][ids])
        if hidden_mode:
            e = ad.concat([e, zt], axis=-1)
        h, c = lstm_step(e, h, c, *w)
        logits = h.data @ params["gen.out.w_h"] + params["gen.out.b"]
        if not hidden_mode:
            logits = logits + z_proj
        probs = softmax(logits / temperature, axis=1)
        u = rng.random((n, 1))
        ids = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), gen.vocab_size - 1)
        out[:, t] = ids
    return out


@dataclass(frozen=True)
class SeqEncoder:
    """Inference LSTM; an affine head on the final hidden state gives λ = [μ, log σ²]."""

    params: ModelParams
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    latent_dim: int
    share_embeddings: bool = False

    @classmethod
    def init(
        cls,
        vocab_size: int,
        embed_dim: int,
        hidden_dim: int,
        latent_dim: int,
        seed: int = 0,
        share_embeddings: bool = False,
        init_range: float = 0.1,
        forget_bias: float = 1.0,
    ) -> "SeqEncoder":
        rng = np.random.default_rng(seed)
        p = {}
        if not share_embeddings:
            p["enc.embed"] = _uniform(rng, (vocab_size, embed_dim), init_range)
        p.update(_lstm_params(rng, "enc.lstm", embed_dim, hidden_dim, init_range, forget_bias))
        p["enc.head.w"] = _uniform(rng, (hidden_dim, 2 * latent_dim), init_range)
        p["enc.head.b"] = np.zeros(2 * latent_dim)
        return cls(ModelParams(p), vocab_size, embed_dim, hidden_dim, latent_dim, share_embeddings)

    def with_params(self, params: ModelParams) -> "SeqEncoder":
        return replace(self, params=params)

    def meta(self) -> Dict[str, object]:
        return {
            "kind": "encoder",
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "latent_dim": self.latent_dim,
            "share_embeddings": self.share_embeddings,
        }

    @classmethod
    def from_meta(cls, params: ModelParams, meta: Mapping) -> "SeqEncoder":
        return cls(
            params, int(meta["vocab_size"]), int(meta["embed_dim"]), int(meta["hidden_dim"]),
            int(meta["latent_dim"]), bool(meta.get("share_embeddings", False)),
        )


def encode_embedded(phi: SeqEncoder, p: Params, steps: List[Tensor]) -> Tensor:
    """λ (B, 2d) from already-embedded inputs, one (B, E) tensor per position."""
    params = phi.params
    w_x, w_h, b = (_get(p, params, f"enc.lstm.{n}") for n in ("w_x", "w_h", "b"))
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, phi.hidden_dim)))
    c = Tensor(np.zeros((batch, phi.hidden_dim)))
    for e in steps:
        h, c = lstm_step(e, h, c, w_x, w_h, b)
    return ad.add(ad.matmul(h, _get(p, params, "enc.head.w")), _get(p, params, "enc.head.b"))


def _embed_name(phi: SeqEncoder) -> str:
    return "gen.embed" if phi.share_embeddings else "enc.embed"


def _encoder_inputs(phi: SeqEncoder, gen: Optional[SeqGenModel]) -> ModelParams:
    if not phi.share_embeddings:
        return phi.params
    if gen is None:
        raise ValueError("encoder shares the generator embedding; pass gen")
    return phi.params.merge(gen.params.subset(["gen.embed"]))


def _encoder_fn(phi: SeqEncoder, x: np.ndarray):
    def f(p: Params) -> Tensor:
        table = p[_embed_name(phi)]
        steps = [ad.embedding_lookup(table, x[:, t]) for t in range(x.shape[1])]
        return encode_embedded(phi, p, steps)
    return f


def _encoder_batch(phi: SeqEncoder, x) -> Tuple[np.ndarray, bool]:
    x = _check_tokens(x, phi.vocab_size)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.size == 0 or x.shape[1] == 0:
        raise EmptyInput("encoder needs a nonempty sequence")
    return x, single


def encode(phi: SeqEncoder, x, gen: Optional[SeqGenModel] = None) -> VarParams:
    """λ₀ = enc(x; φ) for one sequence (T,) or a batch (B, T)."""
    xb, single = _encoder_batch(phi, x)
    inputs = _encoder_inputs(phi, gen)
    lam = _encoder_fn(phi, xb)({k: Tensor(v) for k, v in inputs.items()}).data
    return VarParams.from_stacked(lam[0] if single else lam)


def encoder_vjp(
    phi: SeqEncoder, x, cotangent: np.ndarray, gen: Optional[SeqGenModel] = None
) -> Tuple[ModelParams, Optional[ModelParams]]:
    """
    (dλ₀/dφ)ᵀ · cotangent. Returns (φ gradient, gradient for the shared generator
    embedding or None when embeddings are not shared).
    """
    xb, single = _encoder_batch(phi, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single:
        cot = cot[None, :]
    grads = ad.vjp(_encoder_fn(phi, xb), _encoder_inputs(phi, gen), cot)
    phi_grad = grads.subset(phi.params.names())
    shared = grads.subset(["gen.embed"]) if phi.share_embeddings else None
    return phi_grad, shared
