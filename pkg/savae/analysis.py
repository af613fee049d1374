"""
Post-hoc analysis producing plot-ready tables (nothing is rendered here).

Functions:
 - elbo_landscape: −ELBO over a grid of posterior means (d = 2) with marked points
 - refinement_curves: bound vs number of test-time SVI steps, encoder and random init
 - amortization_gap: encoder bound minus refined bound
 - output_saliency / input_saliency: per-token gradient norms w.r.t. z and w.r.t. the
   encoder's input embeddings
 - saliency_table / saliency_aggregates / saliency_correlation / spearman_stability
 - write_artifact: CSV plus a JSON sidecar with the settings that produced it
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy.stats import pearsonr, spearmanr

from savae import autodiff as ad
from savae.autodiff import ModelParams
from savae.config import SviConfig
from savae.data_utils import derive_seed, manifest_ref, write_json
from savae.errors import DimensionError, MissingArtifact
from savae.models import SeqEncoder, SeqGenModel, encode, encode_embedded, sequence_nll, token_nll
from savae.svi import random_init, svi_forward
from savae.training import ModelBundle, evaluate_examples, summarize
from savae.variational import VarParams

logger = logging.getLogger(__name__)

REFINEMENT_STEPS = (0, 10, 20, 40)
_CELL_CHUNK = 1024
_NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# landscape
# ---------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    mu1: np.ndarray
    mu2: np.ndarray
    values: np.ndarray  # values[i, j] is the −ELBO at (mu1[i], mu2[j])
    log_var: float
    n_seeds: int
    seed: int
    marks: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def optimum(self) -> np.ndarray:
        i, j = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return np.array([self.mu1[i], self.mu2[j]])

    @property
    def optimum_value(self) -> float:
        return float(np.min(self.values))

    def contains(self, mu: np.ndarray) -> bool:
        return bool(self.mu1[0] <= mu[0] <= self.mu1[-1] and self.mu2[0] <= mu[1] <= self.mu2[-1])

    def to_frame(self) -> pd.DataFrame:
        m1, m2 = np.meshgrid(self.mu1, self.mu2, indexing="ij")
        return pd.DataFrame({"mu1": m1.ravel(), "mu2": m2.ravel(), "neg_elbo": self.values.ravel()})

    def header(self) -> Dict[str, object]:
        return {
            "log_var": self.log_var,
            "n_seeds": self.n_seeds,
            "seed": self.seed,
            "grid": [float(self.mu1[0]), float(self.mu1[-1]), int(self.mu1.size)],
            "optimum": [float(v) for v in self.optimum],
            "optimum_neg_elbo": self.optimum_value,
        }


def _cell_values(gen: SeqGenModel, x: np.ndarray, mu: np.ndarray, log_var: np.ndarray, noises: List[np.ndarray]) -> np.ndarray:
    """Mean over common noise draws of the −ELBO at each row of (mu, log_var)."""
    out = np.zeros(mu.shape[0])
    kl = 0.5 * np.sum(mu * mu + np.exp(log_var) - 1.0 - log_var, axis=1)
    for start in range(0, mu.shape[0], _CELL_CHUNK):
        sl = slice(start, start + _CELL_CHUNK)
        n = mu[sl].shape[0]
        xs = np.broadcast_to(x, (n, x.size))
        total = np.zeros(n)
        for eps in noises:
            z = ad.gaussian_sample(mu[sl], log_var[sl], noise=np.broadcast_to(eps, (n, eps.shape[-1])))
            total += sequence_nll(gen, {}, xs, z).data
        out[sl] = total / len(noises)
    return out + kl


def _grid_values(gen, x, axis: np.ndarray, log_var: float, noises) -> np.ndarray:
    m1, m2 = np.meshgrid(axis, axis, indexing="ij")
    mu = np.stack([m1.ravel(), m2.ravel()], axis=1)
    vals = _cell_values(gen, x, mu, np.full_like(mu, log_var), noises)
    return vals.reshape(axis.size, axis.size)


def elbo_landscape(
    gen: SeqGenModel,
    x: np.ndarray,
    lo: float = -3.0,
    hi: float = 3.0,
    resolution: int = 61,
    n_seeds: int = 1,
    seed: int = 0,
    log_var: Optional[float] = None,
    marks: Optional[Mapping[str, np.ndarray]] = None,
    log_var_candidates: Optional[Sequence[float]] = None,
) -> LandscapeGrid:
    """
    −ELBO over a resolution × resolution grid of means with log σ² shared by both
    dimensions. Without an explicit log_var, a first pass at log σ² = 0 locates the
    best mean, a 1-d search there picks log σ², and the final grid uses that value.
    `marks` maps a label to an (n, 2) array of means (a single point or a trajectory).
    """
    if gen.latent_dim != 2:
        raise DimensionError(f"landscape needs latent dim 2, model has {gen.latent_dim}")
    x = np.asarray(x, dtype=np.int64)
    axis = np.linspace(lo, hi, resolution)
    noises = [ad.draw_noise(derive_seed(seed, s), (1, 2)) for s in range(n_seeds)]
    if log_var is None:
        coarse = _grid_values(gen, x, axis, 0.0, noises)
        i, j = np.unravel_index(int(np.argmin(coarse)), coarse.shape)
        candidates = np.asarray(log_var_candidates if log_var_candidates is not None else np.linspace(-8.0, 2.0, 41))
        at = np.tile([axis[i], axis[j]], (candidates.size, 1))
        scores = _cell_values(gen, x, at, np.tile(candidates[:, None], (1, 2)), noises)
        log_var = float(candidates[int(np.argmin(scores))])
        logger.info("landscape log_var chosen by 1-d search at (%.3f, %.3f): %.3f", axis[i], axis[j], log_var)
    grid = LandscapeGrid(axis, axis.copy(), _grid_values(gen, x, axis, float(log_var), noises), float(log_var), n_seeds, seed)
    rows = []
    for label, points in (marks or {}).items():
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        vals = _cell_values(gen, x, pts, np.full_like(pts, grid.log_var), noises)
        for step, (p, v) in enumerate(zip(pts, vals)):
            inside = grid.contains(p)
            if not inside:
                logger.warning("mark %s step %d at (%.3f, %.3f) lies outside the grid", label, step, p[0], p[1])
            rows.append({"method": label, "step": step, "mu1": p[0], "mu2": p[1], "neg_elbo": v, "in_range": inside})
    grid.marks = pd.DataFrame(rows, columns=["method", "step", "mu1", "mu2", "neg_elbo", "in_range"])
    return grid


def landscape_marks(
    bundle: ModelBundle, x: np.ndarray, svi: SviConfig, seed: int = 0
) -> Dict[str, np.ndarray]:
    """Encoder mean, the refinement trajectory from it, and a trajectory from random init."""
    marks: Dict[str, np.ndarray] = {}
    xb = np.asarray(x, dtype=np.int64)[None, :]
    if bundle.enc is not None:
        shared = bundle.gen if bundle.enc.share_embeddings else None
        lam0 = encode(bundle.enc, xb, shared)
        marks["encoder"] = lam0.mu[:1]
        trace = svi_forward(lam0, bundle.gen, xb, svi, 1.0, seed)
        marks["refined"] = np.stack([VarParams.from_stacked(l).mu[0] for l in trace.lambdas])
    trace = svi_forward(random_init(1, bundle.gen.latent_dim, seed), bundle.gen, xb, svi, 1.0, seed)
    marks["svi"] = np.stack([VarParams.from_stacked(l).mu[0] for l in trace.lambdas])
    return marks


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def refinement_curves(
    bundle: ModelBundle,
    seqs: Sequence[np.ndarray],
    steps: Sequence[int] = REFINEMENT_STEPS,
    svi: Optional[SviConfig] = None,
    seed: int = 0,
    batch_size: int = 200,
    threads: int = 1,
) -> pd.DataFrame:
    """One row per (init, K′): mean −ELBO bound and KL after K′ test-time SVI steps."""
    inits = ["random"] if bundle.enc is None else ["encoder", "random"]
    rows = []
    for init in inits:
        mode = "encoder_refine" if init == "encoder" else "random_refine"
        for k in steps:
            s = summarize(evaluate_examples(bundle, seqs, mode, svi, int(k), seed, batch_size, threads))
            rows.append({
                "regime": bundle.regime.value, "init": init, "K": int(k),
                "bound": s["neg_elbo"], "kl": s["kl"], "ppl": s["ppl"],
            })
            logger.info("refinement %s K'=%d: bound %.4f", init, k, s["neg_elbo"])
    return pd.DataFrame(rows, columns=["regime", "init", "K", "bound", "kl", "ppl"])


def amortization_gap(
    bundle: ModelBundle, seqs: Sequence[np.ndarray], steps: int, svi: Optional[SviConfig] = None, seed: int = 0,
    batch_size: int = 200,
) -> Dict[str, float]:
    if bundle.enc is None:
        raise ValueError("amortization gap needs an encoder")
    base = evaluate_examples(bundle, seqs, "encoder", svi, None, seed, batch_size)
    refined = evaluate_examples(bundle, seqs, "encoder_refine", svi, steps, seed, batch_size)
    gap = base["neg_elbo"] - refined["neg_elbo"]
    return {
        "encoder_bound": float(base["neg_elbo"].mean()),
        "refined_bound": float(refined["neg_elbo"].mean()),
        "gap": float(gap.mean()),
        "steps": int(steps),
    }


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

def _posterior_draws(lam: VarParams, n_samples: int, seed: int) -> np.ndarray:
    """(n_samples, d) reparameterized draws; draw s uses child seed s."""
    rows = []
    for s in range(n_samples):
        eps = ad.draw_noise(derive_seed(seed, s), lam.mu.shape)
        rows.append(ad.gaussian_sample(lam.mu, lam.log_var, noise=eps).data)
    return np.stack(rows)


def _output_saliency(gen: SeqGenModel, lam: VarParams, x: np.ndarray, n_samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(saliency, mean token log-prob), each of shape (T,)."""
    x = np.asarray(x, dtype=np.int64)
    T = x.size
    draws = _posterior_draws(lam, n_samples, seed)
    # row (s, t) carries draw s and is read only at token t
    Z = np.repeat(draws, T, axis=0)
    X = np.tile(x, (n_samples * T, 1))
    mask = np.tile(np.eye(T), (n_samples, 1))
    store: Dict[str, np.ndarray] = {}

    def f(p):
        logp = ad.scale(token_nll(gen, {}, X, p["z"]), -1.0)
        store["logp"] = logp.data
        return ad.sum(ad.mul(logp, mask))

    _, grads = ad.value_and_grad(f, ModelParams({"z": Z}))
    norms = np.linalg.norm(grads["z"], axis=1).reshape(n_samples, T)
    logp = store["logp"][np.arange(n_samples * T), np.tile(np.arange(T), n_samples)].reshape(n_samples, T)
    return norms.mean(axis=0), logp.mean(axis=0)


def output_saliency(gen: SeqGenModel, lam: VarParams, x: np.ndarray, n_samples: int = 5, seed: int = 0) -> np.ndarray:
    """E_q[‖d log p(x_t | x_<t, z) / dz‖₂] per token, with n_samples posterior draws."""
    return _output_saliency(gen, lam, x, n_samples, seed)[0]


def input_saliency(
    enc: SeqEncoder, x: np.ndarray, n_samples: int = 5, seed: int = 0, gen: Optional[SeqGenModel] = None
) -> np.ndarray:
    """‖E_q[d‖z‖₂ / dw_t]‖₂ per position, w_t the embedding the encoder reads at t."""
    x = np.asarray(x, dtype=np.int64)
    if enc.share_embeddings and gen is None:
        raise ValueError("encoder shares the generator embedding; pass gen")
    table = gen.params["gen.embed"] if enc.share_embeddings else enc.params["enc.embed"]
    leaves = ModelParams({f"w.{t}": np.tile(table[tok], (n_samples, 1)) for t, tok in enumerate(x)})
    eps = np.concatenate([ad.draw_noise(derive_seed(seed, s), (1, enc.latent_dim)) for s in range(n_samples)])
    d = enc.latent_dim

    def f(p):
        lam = encode_embedded(enc, {}, [p[f"w.{t}"] for t in range(x.size)])
        z = ad.gaussian_sample(ad.slice_axis(lam, 0, d), ad.slice_axis(lam, d, 2 * d), noise=eps)
        # offset keeps the sqrt derivative finite at z = 0
        return ad.sum(ad.sqrt(ad.add(ad.sum(ad.square(z), axis=1), _NORM_FLOOR)))

    _, grads = ad.value_and_grad(f, leaves)
    return np.array([np.linalg.norm(grads[f"w.{t}"].mean(axis=0)) for t in range(x.size)])


def saliency_table(
    bundle: ModelBundle, seqs: Sequence[np.ndarray], n_samples: int = 5, seed: int = 0,
    svi: Optional[SviConfig] = None,
) -> pd.DataFrame:
    """
    One row per (example, position). λ comes from the encoder, or from random-init SVI
    when the regime has none (input saliency is then NaN).
    """
    rows = []
    for i, seq in enumerate(seqs):
        x = np.asarray(seq, dtype=np.int64)
        ex_seed = derive_seed(seed, i)
        if bundle.enc is not None:
            shared = bundle.gen if bundle.enc.share_embeddings else None
            lam = encode(bundle.enc, x, shared)
            in_sal = input_saliency(bundle.enc, x, n_samples, ex_seed, shared)
        else:
            lam0 = random_init(1, bundle.gen.latent_dim, ex_seed)
            trace = svi_forward(lam0, bundle.gen, x[None, :], svi or SviConfig(), 1.0, ex_seed)
            lam = trace.lambda_at(trace.steps).row(0)
            in_sal = np.full(x.size, np.nan)
        out_sal, logp = _output_saliency(bundle.gen, lam, x, n_samples, ex_seed)
        for t in range(x.size):
            rows.append({
                "example": i, "position": t, "token": int(x[t]),
                "out_sal": out_sal[t], "in_sal": in_sal[t], "logprob": logp[t],
            })
    return pd.DataFrame(rows, columns=["example", "position", "token", "out_sal", "in_sal", "logprob"])


def read_tag_map(path: Path) -> Dict[int, str]:
    """Lines of "<token id> <tag>"."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path), "tag map")
    tags = {}
    with open(path, "r", encoding="utf8") as f:
        for line in f:
            parts = line.split()
            if len(parts) >= 2:
                tags[int(parts[0])] = parts[1]
    return tags


def frequency_classes(token_counts: np.ndarray) -> Dict[int, str]:
    """Tags tokens seen in training as low / mid / high by frequency tertile."""
    counts = np.asarray(token_counts)
    seen = np.flatnonzero(counts)
    if seen.size == 0:
        return {}
    lo, hi = np.quantile(counts[seen], [1 / 3, 2 / 3])
    return {int(t): ("low" if counts[t] <= lo else "high" if counts[t] > hi else "mid") for t in seen}


def _bucket_means(frame: pd.DataFrame, key: str) -> pd.DataFrame:
    out = frame.groupby(key, sort=True).agg(
        out_sal=("out_sal", "mean"), in_sal=("in_sal", "mean"), count=("out_sal", "size")
    )
    return out.reset_index().rename(columns={key: "bucket"})


def saliency_aggregates(
    table: pd.DataFrame, token_counts: np.ndarray, tag_map: Optional[Mapping[int, str]] = None
) -> Dict[str, pd.DataFrame]:
    """Bucket means with counts by position, log₂ training frequency, log-prob and tag."""
    frame = table.copy()
    counts = np.asarray(token_counts)
    frame["log2_freq"] = np.floor(np.log2(np.maximum(counts[frame["token"].to_numpy()], 1))).astype(int)
    frame["logprob_bin"] = np.floor(frame["logprob"]).astype(int)
    result = {
        "position": _bucket_means(frame, "position"),
        "log_frequency": _bucket_means(frame, "log2_freq"),
        "logprob": _bucket_means(frame, "logprob_bin"),
    }
    if tag_map is None:
        logger.info("no tag map supplied; skipping per-class saliency")
    else:
        frame["class"] = frame["token"].map(lambda t: tag_map.get(int(t), "unk"))
        result["class"] = _bucket_means(frame, "class")
    return result


def saliency_correlation(table: pd.DataFrame) -> float:
    """Pearson correlation of output saliency with token log-probability (NaN if degenerate)."""
    if len(table) < 2 or table["out_sal"].nunique() < 2 or table["logprob"].nunique() < 2:
        return float("nan")
    r, _ = pearsonr(table["out_sal"], table["logprob"])
    return float(r)


def spearman_stability(
    gen: SeqGenModel, lam: VarParams, x: np.ndarray, small: int = 5, large: int = 50, seed: int = 0
) -> float:
    """Rank agreement of output saliencies estimated with `small` vs `large` draws."""
    a = output_saliency(gen, lam, x, small, seed)
    b = output_saliency(gen, lam, x, large, seed)
    rho, _ = spearmanr(a, b)
    return float(rho)


def write_artifact(frame: pd.DataFrame, path: Path, sidecar: Mapping, manifest_dir: Optional[Path] = None) -> List[Path]:
    """CSV plus a JSON sidecar; the sidecar names the run manifest when `manifest_dir` is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    header = {"artifact": path.name, **dict(sidecar)}
    if manifest_dir is not None:
        header["manifest"] = manifest_ref(path.parent, manifest_dir)
    return [path, write_json(path.with_suffix(".json"), header)]
