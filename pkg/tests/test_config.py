import json

import numpy as np
import pytest

from savae.config import (
    ExperimentConfig, ModelDims, OracleSpec, Regime, SviConfig, TrainConfig, load_config, override,
)
from savae.errors import ConfigError


def test_defaults():
    cfg = TrainConfig()
    assert cfg.regime is Regime.SA_VAE
    assert cfg.svi.steps == 20
    assert cfg.svi.momentum == 0.5
    assert cfg.schedule.kl_start == 0.1
    np.testing.assert_array_equal(SviConfig(steps=2).weights(), [0.0, 0.0, 1.0])
    assert SviConfig(clip=3.0).theta_clip == 3.0
    assert SviConfig(clip=3.0, hvp_clip=1.0).theta_clip == 1.0
    assert OracleSpec().wide_init == 5.0
    assert not Regime.SVI.uses_encoder


def test_step_weights_validation():
    assert SviConfig(steps=1, step_weights=[0.5, 1.0]).weights().tolist() == [0.5, 1.0]
    with pytest.raises(ValueError):
        SviConfig(steps=2, step_weights=[1.0])
    with pytest.raises(ValueError):
        SviConfig(steps=1, step_weights=[-1.0, 1.0])


def test_shared_embeddings_need_matching_dims():
    with pytest.raises(ValueError):
        ModelDims(embed_dim=10, enc_embed_dim=12, share_embeddings=True)


def test_oracle_fixed_needs_checkpoint():
    with pytest.raises(ValueError):
        TrainConfig(generator="oracle_fixed")
    assert TrainConfig(generator="oracle_fixed", oracle_checkpoint="o.json").generator == "oracle_fixed"


def test_load_json_and_toml(tmp_path):
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"regime": "vae", "svi": {"steps": 3}}))
    cfg = load_config(str(js), TrainConfig)
    assert cfg.regime is Regime.VAE
    assert cfg.svi.steps == 3

    toml = tmp_path / "c.toml"
    toml.write_text('true_nll_samples = 10\nregimes = ["vae"]\n\n[oracle]\nvocab_size = 50\n')
    exp = load_config(str(toml), ExperimentConfig)
    assert exp.oracle.vocab_size == 50
    assert exp.regimes == [Regime.VAE]


def test_bad_configs_raise_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"), TrainConfig)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad), TrainConfig)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"regime": "gan"}))
    with pytest.raises(ConfigError):
        load_config(str(unknown), TrainConfig)
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"learning_rte": 1.0}))
    with pytest.raises(ConfigError):
        load_config(str(extra), TrainConfig)


def test_override_revalidates():
    cfg = TrainConfig()
    assert override(cfg, regime=None) is cfg
    assert override(cfg, regime="vae").regime is Regime.VAE
    with pytest.raises(ConfigError):
        override(cfg, threads=0)
