"""
Command-line entry point.

Usage:
    python -m savae.cli synth --config configs/tiny.json
    python -m savae.cli train --config configs/tiny.json --regime sa_vae --steps 20
    python -m savae.cli eval --run runs/train/sa_vae --mode random_refine --steps 40
    python -m savae.cli landscape --run runs/train/sa_vae --index 0
    python -m savae.cli saliency --run runs/train/sa_vae --limit 50
    python -m savae.cli generate --run runs/train/sa_vae --temperature 0.25
    python -m savae.cli reproduce table1 --config configs/table1_reduced.json

Every command writes a manifest.json next to its outputs and prints a JSON summary.
The output root defaults to ./runs and can be moved with SAVAE_OUT_ROOT.
"""
from pathlib import Path
from typing import Dict, Optional, Sequence
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd
from pydantic import ValidationError

from savae.analysis import (
    REFINEMENT_STEPS, amortization_gap, elbo_landscape, frequency_classes, landscape_marks, read_tag_map,
    refinement_curves, saliency_aggregates, saliency_correlation, saliency_table, write_artifact,
)
from savae.config import ExperimentConfig, Regime, TrainConfig, load_config, override, validate_config
from savae.data_utils import (
    MANIFEST_NAME, RunManifest, load_checkpoint, load_dataset, output_root, save_checkpoint, save_dataset, write_json,
    write_token_file,
)
from savae.errors import ConfigError, DimensionError, EmptyInput, MissingArtifact, SaVaeError, VocabError
from savae.models import SeqGenModel, encode, sample_sequences
from savae.oracle import build_oracle, sample_dataset, true_nll_estimate
from savae.training import ModelBundle, build_bundle, default_eval_mode, evaluate, train
from savae.variational import sample_z

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INVALID = 4

EVAL_MODES = ["encoder", "encoder_refine", "random_refine"]
# hyphenated spellings accepted on the command line
MODE_ALIASES = {"encoder-only": "encoder", "encoder-refine": "encoder_refine", "random-refine": "random_refine"}


def _experiment(args) -> ExperimentConfig:
    return load_config(args.config, ExperimentConfig) if args.config else ExperimentConfig()


def _out(args, *default: str) -> Path:
    return Path(args.out) if args.out else output_root().joinpath(*default)


def _print(summary: Dict) -> None:
    print(json.dumps(summary, indent=2, default=str))


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    bundle = ModelBundle.load(run_dir, "final")
    cfg_path = run_dir / "config.json"
    cfg = load_config(str(cfg_path), TrainConfig) if cfg_path.exists() else TrainConfig()
    return bundle, cfg


def _load_oracle(path: str) -> SeqGenModel:
    params, meta = load_checkpoint(Path(path))
    return SeqGenModel.from_meta(params, meta)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def synthesize(cfg: ExperimentConfig, out_dir: Path, seed: Optional[int] = None) -> Dict[str, object]:
    spec = cfg.oracle if seed is None else override(cfg.oracle, seed=seed)
    manifest = RunManifest.start("synth", spec.model_dump(mode="json"), spec.seed)
    manifest.tic("synth")
    oracle = build_oracle(spec)
    ckpt = save_checkpoint(out_dir / "oracle.json", oracle.params, {**oracle.meta(), "manifest": MANIFEST_NAME})
    data = sample_dataset(oracle, spec)
    data.meta["oracle_checkpoint"] = str(ckpt)
    data.meta["manifest"] = MANIFEST_NAME
    files = save_dataset(data, out_dir, spec.model_dump(mode="json"))
    manifest.toc("synth")
    manifest.add(ckpt, *files)
    manifest.write(out_dir)
    return {"out": str(out_dir), "sizes": data.sizes(), "oracle_checkpoint": str(ckpt)}


def cmd_synth(args) -> Dict[str, object]:
    return synthesize(_experiment(args), _out(args, "synthetic"), args.seed)


def run_training(cfg: TrainConfig, out_dir: Path) -> Dict[str, object]:
    out_dir = Path(out_dir)
    manifest = RunManifest.start("train", cfg.model_dump(mode="json"), cfg.seed)
    data = load_dataset(Path(cfg.data_dir))
    oracle = _load_oracle(cfg.oracle_checkpoint) if cfg.generator == "oracle_fixed" else None
    bundle = build_bundle(cfg, data.vocab_size, oracle)
    cfg_path = write_json(out_dir / "config.json", cfg.model_dump(mode="json"))
    manifest.tic("train")
    result = train(cfg, bundle, data, out_dir)
    manifest.toc("train")
    manifest.add(cfg_path, *result.files)
    manifest.write(out_dir)
    last = result.history[result.history["split"] == "val"].iloc[-1]
    return {"out": str(out_dir), "regime": cfg.regime.value, "val_neg_elbo": float(last["neg_elbo"]), "val_kl": float(last["kl"])}


def _train_config(args) -> TrainConfig:
    cfg = _experiment(args).train
    svi = cfg.svi if args.steps is None else override(cfg.svi, steps=args.steps)
    data_dir = args.data
    oracle = args.oracle
    if cfg.generator == "oracle_fixed" and oracle is None and cfg.oracle_checkpoint is None:
        sidecar = Path(data_dir or cfg.data_dir) / "dataset.json"
        if sidecar.exists():
            oracle = json.loads(sidecar.read_text(encoding="utf8")).get("oracle_checkpoint")
    payload = cfg.model_dump(mode="json")
    payload["svi"] = svi.model_dump(mode="json")
    for key, value in (("regime", args.regime), ("seed", args.seed), ("threads", args.threads),
                       ("data_dir", data_dir), ("oracle_checkpoint", oracle), ("generator", args.generator)):
        if value is not None:
            payload[key] = value
    return validate_config(payload, TrainConfig)


def cmd_train(args) -> Dict[str, object]:
    cfg = _train_config(args)
    return run_training(cfg, _out(args, "train", cfg.regime.value))


def cmd_eval(args) -> Dict[str, object]:
    bundle, cfg = _load_run(Path(args.run))
    data = load_dataset(Path(args.data or cfg.data_dir))
    seqs = data.split(args.split)
    mode = MODE_ALIASES.get(args.mode, args.mode) or default_eval_mode(bundle.regime)
    seed = cfg.seed if args.seed is None else args.seed
    out_dir = _out(args, "eval", bundle.regime.value)
    manifest = RunManifest.start("eval", {"run": args.run, "mode": mode, "steps": args.steps, "split": args.split}, seed)
    metrics = evaluate(
        bundle, seqs, mode, svi=cfg.svi, steps=args.steps, seed=seed,
        batch_size=cfg.eval_batch_size, threads=args.threads or cfg.threads,
    )
    summary = {"regime": bundle.regime.value, "mode": mode, "steps": args.steps, "split": args.split, **metrics}
    if args.curves:
        curves = refinement_curves(bundle, seqs, REFINEMENT_STEPS, cfg.svi, seed, cfg.eval_batch_size, args.threads or cfg.threads)
        manifest.add(*write_artifact(curves, out_dir / "curves.csv", {"run": args.run, "split": args.split, "seed": seed}, out_dir))
        if bundle.enc is not None:
            summary["amortization_gap"] = amortization_gap(bundle, seqs, cfg.svi.steps, cfg.svi, seed, cfg.eval_batch_size)
    manifest.add(write_json(out_dir / "eval.json", {**summary, "manifest": MANIFEST_NAME}))
    manifest.write(out_dir)
    return summary


def cmd_landscape(args) -> Dict[str, object]:
    bundle, cfg = _load_run(Path(args.run))
    if bundle.gen.latent_dim != 2:
        raise DimensionError(f"landscape needs latent dim 2, run has {bundle.gen.latent_dim}")
    data = load_dataset(Path(args.data or cfg.data_dir))
    seqs = data.split(args.split)
    if not 0 <= args.index < len(seqs):
        raise EmptyInput(f"example index {args.index} outside split {args.split} of size {len(seqs)}")
    x = seqs[args.index]
    seed = cfg.seed if args.seed is None else args.seed
    svi = cfg.svi if args.steps is None else override(cfg.svi, steps=args.steps)
    out_dir = _out(args, "landscape", bundle.regime.value)
    settings = {"run": args.run, "split": args.split, "index": args.index, "resolution": args.resolution,
                "n_seeds": args.n_seeds, "seed": seed}
    manifest = RunManifest.start("landscape", settings, seed)
    grid = elbo_landscape(
        bundle.gen, x, -args.extent, args.extent, args.resolution, args.n_seeds, seed,
        marks=landscape_marks(bundle, x, svi, seed),
    )
    sidecar = {**settings, **grid.header()}
    manifest.add(*write_artifact(grid.to_frame(), out_dir / f"landscape_{args.index}.csv", sidecar, out_dir))
    manifest.add(*write_artifact(grid.marks, out_dir / f"trajectories_{args.index}.csv", sidecar, out_dir))
    manifest.write(out_dir)
    return {"out": str(out_dir), **grid.header(), "out_of_range_marks": int((~grid.marks["in_range"]).sum())}


def cmd_saliency(args) -> Dict[str, object]:
    bundle, cfg = _load_run(Path(args.run))
    data = load_dataset(Path(args.data or cfg.data_dir))
    seqs = data.split(args.split)[: args.limit]
    seed = cfg.seed if args.seed is None else args.seed
    out_dir = _out(args, "saliency", bundle.regime.value)
    settings = {"run": args.run, "split": args.split, "limit": args.limit, "n_samples": args.n_samples, "seed": seed}
    manifest = RunManifest.start("saliency", settings, seed)
    table = saliency_table(bundle, seqs, args.n_samples, seed, cfg.svi)
    counts = data.token_counts("train")
    if args.tag_map == "frequency":
        tags = frequency_classes(counts)
    else:
        tags = read_tag_map(Path(args.tag_map)) if args.tag_map else None
    manifest.add(*write_artifact(table, out_dir / "saliency.csv", settings, out_dir))
    for name, frame in saliency_aggregates(table, counts, tags).items():
        manifest.add(*write_artifact(frame, out_dir / f"saliency_by_{name}.csv", settings, out_dir))
    manifest.write(out_dir)
    return {"out": str(out_dir), "tokens": int(len(table)), "corr_out_sal_logprob": saliency_correlation(table)}


def cmd_generate(args) -> Dict[str, object]:
    bundle, cfg = _load_run(Path(args.run))
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    d = bundle.gen.latent_dim
    if args.index is None:
        z = rng.standard_normal((args.n, d))
        source = "prior"
    else:
        if bundle.enc is None:
            raise ValueError("posterior generation needs an encoder")
        data = load_dataset(Path(args.data or cfg.data_dir))
        seqs = data.split(args.split)
        if not 0 <= args.index < len(seqs):
            raise EmptyInput(f"example index {args.index} outside split {args.split}")
        shared = bundle.gen if bundle.enc.share_embeddings else None
        lam = encode(bundle.enc, np.tile(seqs[args.index], (args.n, 1)), shared)
        z = sample_z(lam, seed)
        source = f"posterior:{args.split}[{args.index}]"
    samples = sample_sequences(bundle.gen, z, args.length, rng, args.temperature)
    out_dir = _out(args, "generate", bundle.regime.value)
    settings = {"run": args.run, "n": args.n, "length": args.length, "temperature": args.temperature,
                "seed": seed, "source": source}
    manifest = RunManifest.start("generate", settings, seed)
    path = out_dir / "samples.txt"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_token_file(path, samples)
    manifest.add(path, write_json(out_dir / "samples.json", {**settings, "artifact": path.name, "manifest": MANIFEST_NAME}))
    manifest.write(out_dir)
    return {"out": str(path), "samples": [" ".join(map(str, s)) for s in samples[:5]], **settings}


def reproduce_table1(cfg: ExperimentConfig, out_dir: Path, seed: Optional[int] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """Synthesize once, then train and test every (column, regime) pair."""
    out_dir = Path(out_dir)
    master = cfg.train.seed if seed is None else seed
    manifest = RunManifest.start("reproduce table1", cfg.model_dump(mode="json"), master)
    manifest.tic("total")
    data_dir = out_dir / "data"
    synth = synthesize(cfg, data_dir)
    data = load_dataset(data_dir)
    oracle = _load_oracle(synth["oracle_checkpoint"])
    true_nll = true_nll_estimate(oracle, data, cfg.true_nll_samples, master, "test", threads or cfg.train.threads)
    rows = []
    for column in cfg.columns:
        for regime in cfg.regimes:
            payload = cfg.train.model_dump(mode="json")
            payload.update({"regime": regime.value, "generator": column, "data_dir": str(data_dir),
                            "oracle_checkpoint": synth["oracle_checkpoint"], "seed": master})
            if threads is not None:
                payload["threads"] = threads
            tcfg = validate_config(payload, TrainConfig)
            run_dir = out_dir / column / regime.value
            run_training(tcfg, run_dir)
            bundle = ModelBundle.load(run_dir, "final")
            test = evaluate(bundle, data.split("test"), default_eval_mode(regime), svi=tcfg.svi, seed=master,
                            batch_size=tcfg.eval_batch_size, threads=tcfg.threads)
            rows.append({"column": column, "regime": regime.value, "test_neg_elbo": test["neg_elbo"],
                         "test_kl": test["kl"], "true_nll": true_nll})
            manifest.add(run_dir / "metrics.csv")
            logger.info("table1 %s/%s: test %.4f (true NLL %.4f)", column, regime.value, test["neg_elbo"], true_nll)
    table = pd.DataFrame(rows, columns=["column", "regime", "test_neg_elbo", "test_kl", "true_nll"])
    manifest.toc("total")
    manifest.add(*write_artifact(table, out_dir / "table1.csv", {"master_seed": master}, out_dir))
    manifest.write(out_dir)
    return table


def cmd_reproduce(args) -> Dict[str, object]:
    table = reproduce_table1(_experiment(args), _out(args, "table1"), args.seed, args.threads)
    return {"rows": table.to_dict(orient="records")}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="savae", description="Semi-amortized variational autoencoders")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, run=False):
        if config:
            p.add_argument("--config", help="experiment config (JSON or TOML)")
        if run:
            p.add_argument("--run", required=True, help="training output directory")
            p.add_argument("--data", help="dataset directory (default: the run's data_dir)")
            p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)

    p = sub.add_parser("synth", help="build the oracle and sample a dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one regime")
    common(p)
    p.add_argument("--regime", choices=[r.value for r in Regime])
    p.add_argument("--steps", type=int, help="SVI steps K")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--oracle", help="oracle checkpoint (oracle_fixed generator)")
    p.add_argument("--generator", choices=["oracle_fixed", "learned"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    common(p, config=False, run=True)
    p.add_argument("--mode", choices=EVAL_MODES + list(MODE_ALIASES))
    p.add_argument("--steps", type=int, help="test-time SVI steps K'")
    p.add_argument("--curves", action="store_true", help="also write refinement curves and the amortization gap")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="ELBO grid over posterior means (d=2)")
    common(p, config=False, run=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--resolution", type=int, default=61)
    p.add_argument("--extent", type=float, default=3.0)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("saliency", help="output and input saliency tables")
    common(p, config=False, run=True)
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--n-samples", type=int, default=5)
    p.add_argument("--tag-map", help='file of "<token> <tag>" lines, or "frequency" for frequency tertiles')
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("generate", help="sample sequences from the generator")
    common(p, config=False, run=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--length", type=int, default=5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--index", type=int, help="sample z from the posterior of this example instead of the prior")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reproduce", help="one-command experiment pipelines")
    p.add_argument("target", choices=["table1"])
    common(p)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _print(args.func(args))
        return EXIT_OK
    except (ConfigError, ValidationError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except (DimensionError, VocabError, EmptyInput) as exc:
        logger.error("invalid request: %s", exc)
        return EXIT_INVALID
    except (SaVaeError, OSError) as exc:
        logger.error("failed: %s", exc)
        return EXIT_FAILURE
    except ValueError as exc:
        logger.error("invalid request: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
