"""
Data and artifact utilities.

Functions:
 - derive_seed: deterministic 64-bit child seed from a master seed and integer keys
 - write_token_file / read_token_file: newline-delimited integer-token sequences
 - save_dataset / load_dataset: split files plus a JSON spec sidecar
 - make_batches: equal-length minibatches in a seeded order
 - save_checkpoint / load_checkpoint: JSON map name -> (shape, row-major values)
 - append_metrics: metrics CSV log (one row per epoch and split)
 - RunManifest: config hash, seed, source revision, produced files, timings
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence
import hashlib
import json
import logging
import os
import subprocess
import time

import numpy as np
import pandas as pd

from savae import __version__
from savae.autodiff import ModelParams
from savae.errors import MissingArtifact, VocabError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METRIC_COLUMNS = ["epoch", "split", "neg_elbo", "recon", "kl", "lr", "kl_multiplier"]
OUT_ROOT_ENV = "SAVAE_OUT_ROOT"
MANIFEST_NAME = "manifest.json"


def derive_seed(master: int, *keys: int) -> int:
    """Child seed for (master, keys); independent of how many siblings are drawn."""
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, default))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Token sequences per split; sequences in a split may differ in length."""

    splits: Dict[str, List[np.ndarray]]
    vocab_size: int
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, seqs in self.splits.items():
            for seq in seqs:
                if seq.size and (seq.min() < 0 or seq.max() >= self.vocab_size):
                    raise VocabError(f"split {name}: token outside [0, {self.vocab_size})")

    def split(self, name: str) -> List[np.ndarray]:
        return self.splits[name]

    def sizes(self) -> Dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def as_matrix(self, name: str) -> np.ndarray:
        """Stack a split whose sequences share one length into an (N, T) array."""
        seqs = self.splits[name]
        lengths = {len(s) for s in seqs}
        if len(lengths) > 1:
            raise ValueError(f"split {name} has mixed lengths {sorted(lengths)}")
        return np.stack(seqs).astype(np.int64) if seqs else np.zeros((0, 0), dtype=np.int64)

    def token_counts(self, name: str = "train") -> np.ndarray:
        counts = np.zeros(self.vocab_size, dtype=np.int64)
        for seq in self.splits[name]:
            np.add.at(counts, seq, 1)
        return counts


def write_token_file(path: Path, seqs: Iterable[np.ndarray]) -> None:
    with open(path, "w", encoding="utf8", newline="\n") as f:
        for seq in seqs:
            f.write(" ".join(str(int(t)) for t in seq) + "\n")


def read_token_file(path: Path) -> List[np.ndarray]:
    """Read newline-delimited, whitespace-separated integer tokens; blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path), "token file")
    seqs = []
    with open(path, "r", encoding="utf8") as f:
        for line in f:
            line = line.strip()
            if line:
                seqs.append(np.asarray([int(t) for t in line.split()], dtype=np.int64))
    return seqs


def save_dataset(data: Dataset, out_dir: Path, spec: Optional[Mapping] = None) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, seqs in data.splits.items():
        p = out_dir / f"{name}.txt"
        write_token_file(p, seqs)
        written.append(p)
    sidecar = {"vocab_size": data.vocab_size, "sizes": data.sizes(), **data.meta}
    if spec is not None:
        sidecar["spec"] = dict(spec)
    p = out_dir / "dataset.json"
    with open(p, "w", encoding="utf8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    written.append(p)
    return written


def load_dataset(data_dir: Path, vocab_size: Optional[int] = None) -> Dataset:
    data_dir = Path(data_dir)
    meta = {}
    sidecar = data_dir / "dataset.json"
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf8") as f:
            meta = json.load(f)
    vocab = vocab_size or meta.get("vocab_size")
    splits = {name: read_token_file(data_dir / f"{name}.txt") for name in SPLITS}
    if vocab is None:
        vocab = 1 + max(int(s.max()) for seqs in splits.values() for s in seqs if s.size)
    return Dataset(splits=splits, vocab_size=int(vocab), meta=meta)


def make_batches(seqs: Sequence[np.ndarray], batch_size: int, seed: Optional[int] = None) -> List[np.ndarray]:
    """
    Group sequences of equal length into (B, T) batches.
    With a seed, examples are shuffled within each length and the batch order is shuffled.
    """
    by_len: Dict[int, List[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    rng = np.random.default_rng(seed) if seed is not None else None
    batches = []
    for length in sorted(by_len):
        if length == 0:
            continue
        idx = np.asarray(by_len[length])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        for start in range(0, len(idx), batch_size):
            batches.append(np.stack([seqs[i] for i in idx[start:start + batch_size]]).astype(np.int64))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, params: ModelParams, meta: Optional[Mapping] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": dict(meta or {}), "params": params.to_json_dict()}
    try:
        with open(path, "w", encoding="utf8") as f:
            json.dump(payload, f)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Path) -> tuple:
    """Returns (ModelParams, meta dict)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path), "checkpoint")
    with open(path, "r", encoding="utf8") as f:
        payload = json.load(f)
    return ModelParams.from_json_dict(payload["params"]), payload.get("meta", {})


def append_metrics(path: Path, rows: Sequence[Mapping]) -> pd.DataFrame:
    """Append rows to the metrics CSV and return the whole log."""
    path = Path(path)
    new = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    if path.exists():
        log = pd.concat([pd.read_csv(path), new], ignore_index=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        log = new
    log.to_csv(path, index=False, float_format="%.10g")
    return log


def write_json(path: Path, payload: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
    return path


def manifest_ref(artifact_dir: Path, manifest_dir: Path) -> str:
    """Path of the run manifest relative to the directory holding an artifact."""
    return Path(os.path.relpath(Path(manifest_dir) / MANIFEST_NAME, Path(artifact_dir))).as_posix()


def config_hash(payload: Mapping) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()


def source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parents[1],
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"savae-{__version__}"


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    command: str
    revision: str = field(default_factory=source_revision)
    files: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    _clock: Dict[str, float] = field(default_factory=dict, repr=False)

    @classmethod
    def start(cls, command: str, config: Mapping, seed: int) -> "RunManifest":
        return cls(config_hash=config_hash(config), master_seed=int(seed), command=command)

    def tic(self, label: str) -> None:
        self._clock[label] = time.perf_counter()

    def toc(self, label: str) -> None:
        self.timings[label] = round(time.perf_counter() - self._clock.pop(label), 3)

    def add(self, *paths: Path) -> None:
        for p in paths:
            self.files.append(str(p))

    def write(self, out_dir: Path) -> Path:
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "revision": self.revision,
            "files": sorted(set(self.files)),
            "timings": self.timings,
        }
        return write_json(Path(out_dir) / MANIFEST_NAME, payload)
