import hashlib

import pytest

from cyclediff.cdm import CdmConfig
from cyclediff.config import (ConfigError, RunConfig, config_from_text, format_value, load_config,
                              parse_config_text, parse_value)


def test_defaults_map_to_module_configs():
    cfg = RunConfig()
    assert cfg.cdm() == CdmConfig()
    assert cfg.denoiser().in_channels == 1
    assert RunConfig(ae_mode="learned").denoiser().in_channels == 4
    assert cfg.noise_schedule().T == 256 and cfg.noise_schedule().kind == "linear-beta"


def test_cdm_field_names_mirrored():
    assert set(CdmConfig.field_names()) <= set(RunConfig.keys())


def test_parse_text_comments_and_types():
    cfg = config_from_text("""
        # training budget
        pretrain_steps = 100   # short run
        cycle_lambda = 0.5
        renoise_for_cycle = true
        unet_channels = 16, 32
        cycle_norm = L2
    """)
    assert cfg.pretrain_steps == 100 and cfg.cycle_lambda == 0.5 and cfg.renoise_for_cycle is True
    assert cfg.unet_channels == (16, 32) and cfg.cycle_norm == "L2"


@pytest.mark.parametrize("text", ["pretrain_step = 5", "seed = 1\nseed = 2", "just words",
                                  "pretrain_steps = many", "renoise_for_cycle = maybe"])
def test_bad_text_rejected(text):
    with pytest.raises(ConfigError):
        config_from_text(text)


@pytest.mark.parametrize("kv", [("cycle_lambda", "-1"), ("ae_mode", "vq"), ("schedule", "sigmoid"),
                                ("image_size", "30"), ("cycle_norm", "L0"), ("timesteps", "0")])
def test_invalid_values_rejected(kv):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(dict([kv]))


def test_canonical_text_sorted_and_normalised():
    a = config_from_text("cycle_lambda = 1\nunet_channels = 32 , 64")
    lines = a.canonical_text().splitlines()
    assert lines == sorted(lines)
    assert "cycle_lambda=1.0" in lines and "unet_channels=32,64" in lines
    b = config_from_text("   unet_channels=32,64\ncycle_lambda   =   1.0")
    assert a.fingerprint() == b.fingerprint()


def test_fingerprint_is_sha256_excluding_run_keys():
    cfg = RunConfig()
    body = "".join(f"{k}={format_value(getattr(cfg, k))}\n" for k in sorted(RunConfig.keys())
                   if k not in ("out_dir", "seed"))
    assert cfg.fingerprint() == hashlib.sha256(body.encode()).hexdigest()
    assert RunConfig(seed=5, out_dir="/tmp/x").fingerprint() == cfg.fingerprint()
    assert RunConfig(cycle_lambda=2.0).fingerprint() != cfg.fingerprint()


def test_canonical_round_trip():
    cfg = RunConfig(cycle_lambda=0.25, unet_channels=(8, 16), renoise_for_cycle=True, seed=3)
    assert config_from_text(cfg.canonical_text()) == cfg


def test_load_config_layering(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("pretrain_steps = 10\nbatch_size = 4\n")
    monkeypatch.setenv("CDM_SEED", "17")
    cfg = load_config(p, {"batch_size": "2"})
    assert (cfg.pretrain_steps, cfg.batch_size, cfg.seed) == (10, 2, 17)
    assert load_config(p, {"seed": "3"}).seed == 3
    monkeypatch.setenv("CDM_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_parse_value_unknown_key():
    with pytest.raises(ConfigError):
        parse_value("lambda", "1")
    assert parse_config_text("") == {}
