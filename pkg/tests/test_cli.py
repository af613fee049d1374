import json

import pandas as pd
import pytest

from savae.cli import EXIT_CONFIG, EXIT_INVALID, EXIT_MISSING, EXIT_OK, main
from savae.config import Regime
from savae.models import SeqGenModel
from savae.training import ModelBundle


def write_config(path, data_dir, **train):
    payload = {
        "oracle": {"vocab_size": 6, "embed_dim": 3, "hidden_dim": 4, "seq_len": 3,
                   "n_train": 16, "n_val": 8, "n_test": 8, "seed": 5},
        "train": {
            "regime": "sa_vae",
            "svi": {"steps": 2},
            "schedule": {"epochs": 1, "batch_size": 8, "kl_warmup_epochs": 1},
            "model": {"vocab_size": 6, "embed_dim": 3, "hidden_dim": 4, "enc_embed_dim": 3, "enc_hidden_dim": 4},
            "data_dir": str(data_dir),
            "eval_batch_size": 8,
            **train,
        },
        "regimes": ["vae", "sa_vae"],
        "columns": ["oracle_fixed", "learned"],
        "true_nll_samples": 10,
    }
    path.write_text(json.dumps(payload))
    return str(path)


def test_unknown_regime_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train", "--regime", "gan"])
    assert info.value.code == 2


def test_bad_config_exit_code(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"oracle": {"vocab_size": 1}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_run_exit_code(tmp_path):
    assert main(["eval", "--run", str(tmp_path / "nothing")]) == EXIT_MISSING


def test_landscape_rejects_three_latent_dims(tmp_path):
    gen = SeqGenModel.init(5, 3, 4, 3, seed=0)
    ModelBundle(gen, None, Regime.SVI).save(tmp_path / "run", "final")
    assert main(["landscape", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "ls")]) == EXIT_INVALID


def test_synth_is_byte_reproducible(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "data")
    out = tmp_path / "data"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == EXIT_OK
    first = {name: (out / name).read_bytes() for name in ("train.txt", "val.txt", "test.txt", "oracle.json", "dataset.json")}
    assert main(["synth", "--config", cfg, "--out", str(out)]) == EXIT_OK
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name
    assert main(["synth", "--config", cfg, "--out", str(out), "--seed", "6"]) == EXIT_OK
    assert (out / "train.txt").read_bytes() != first["train.txt"]


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    run = tmp_path / "run"
    cfg = write_config(tmp_path / "cfg.json", data)
    assert main(["synth", "--config", cfg, "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(run), "--data", str(data)]) == EXIT_OK
    assert (run / "final_gen.json").exists()
    assert (run / "manifest.json").exists()
    assert json.loads((run / "config.json").read_text())["data_dir"] == str(data)
    assert json.loads((run / "final_gen.json").read_text())["meta"]["manifest"] == "manifest.json"
    epoch_ckpt = json.loads((run / "checkpoints" / "epoch001_gen.json").read_text())
    assert epoch_ckpt["meta"]["manifest"] == "../manifest.json"
    assert json.loads((run / "metrics.json").read_text())["manifest"] == "manifest.json"
    capsys.readouterr()

    assert main(["eval", "--run", str(run), "--out", str(tmp_path / "eval"), "--curves"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["mode"] == "encoder_refine"
    assert summary["examples"] == 8
    assert "amortization_gap" in summary
    curves = pd.read_csv(tmp_path / "eval" / "curves.csv")
    assert sorted(curves["K"].unique()) == [0, 10, 20, 40]
    assert json.loads((tmp_path / "eval" / "curves.json").read_text())["manifest"] == "manifest.json"
    listed = json.loads((tmp_path / "eval" / "manifest.json").read_text())["files"]
    assert str(tmp_path / "eval" / "curves.csv") in listed

    rr = ["eval", "--run", str(run), "--out", str(tmp_path / "eval_rr"), "--mode", "random-refine", "--steps", "2"]
    assert main(rr) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["mode"] == "random_refine"
    assert main(["eval", "--run", str(run), "--out", str(tmp_path / "eval_enc"), "--mode", "encoder-only"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["mode"] == "encoder"

    assert main(["landscape", "--run", str(run), "--out", str(tmp_path / "ls"), "--resolution", "5"]) == EXIT_OK
    assert len(pd.read_csv(tmp_path / "ls" / "landscape_0.csv")) == 25
    assert json.loads((tmp_path / "ls" / "trajectories_0.json").read_text())["manifest"] == "manifest.json"
    assert main(["landscape", "--run", str(run), "--out", str(tmp_path / "ls"), "--index", "99"]) == EXIT_INVALID

    out = tmp_path / "sal"
    assert main(["saliency", "--run", str(run), "--out", str(out), "--limit", "3", "--n-samples", "2",
                 "--tag-map", "frequency"]) == EXIT_OK
    assert len(pd.read_csv(out / "saliency.csv")) == 9
    assert (out / "saliency_by_class.csv").exists()

    gen_out = tmp_path / "gen"
    assert main(["generate", "--run", str(run), "--out", str(gen_out), "--n", "4", "--length", "3"]) == EXIT_OK
    lines = (gen_out / "samples.txt").read_text().splitlines()
    assert len(lines) == 4
    assert all(len(line.split()) == 3 for line in lines)
    assert main(["generate", "--run", str(run), "--out", str(gen_out), "--index", "1", "--n", "2"]) == EXIT_OK


def test_reproduce_table1_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "unused")
    assert main(["reproduce", "table1", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["reproduce", "table1", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
    table = pd.read_csv(tmp_path / "a" / "table1.csv")
    assert len(table) == 4
    assert set(table["column"]) == {"oracle_fixed", "learned"}
    assert (tmp_path / "a" / "table1.csv").read_bytes() == (tmp_path / "b" / "table1.csv").read_bytes()
    for column in ("oracle_fixed", "learned"):
        for regime in ("vae", "sa_vae"):
            a = (tmp_path / "a" / column / regime / "metrics.csv").read_bytes()
            assert a == (tmp_path / "b" / column / regime / "metrics.csv").read_bytes()
