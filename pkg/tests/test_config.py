import pytest

from threemti.config import (
    PRESETS,
    RunConfig,
    build_config,
    config_hash,
    load_config,
    parse_config,
    parse_override,
    save_config,
    short_hash,
    thread_count,
)
from threemti.errors import ConfigError


def test_defaults_cover_every_section():
    cfg = RunConfig()
    assert cfg.data.lr_size == 64
    assert cfg.data.ref_size == 512
    assert cfg.codec.mode == "conv_ae"
    assert cfg.lora.unet_rank == 16
    assert cfg.lora.decoder_rank == 4
    assert cfg.loss.perceptual_weight == 1.0
    assert cfg.train.lr == pytest.approx(2e-5)
    assert (cfg.train.beta1, cfg.train.beta2, cfg.train.eps) == (0.9, 0.999, 1e-8)


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="typo"):
        build_config({"train": {"typo": 1}})
    with pytest.raises(ConfigError):
        build_config({"nosuchsection": {}})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        build_config({"data": {"lr_size": 48, "ref_size": 100}})
    with pytest.raises(ConfigError):
        build_config({"train": {"lr": 0.0}})
    with pytest.raises(ConfigError):
        build_config({"unet": {"levels": 2, "widths": [8, 16], "attention_levels": [2]}})


def test_lambda_alias():
    cfg = build_config({"loss": {"lambda": 0.5}})
    assert cfg.loss.perceptual_weight == 0.5
    assert cfg.to_dict()["loss"]["lambda"] == 0.5


def test_parse_serialize_is_a_fixed_point():
    cfg = load_config(None, "toy")
    again = parse_config(cfg.to_yaml())
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


def test_presets():
    toy = load_config(None, "toy")
    assert (toy.data.lr_size, toy.data.ref_size) == (32, 128)
    assert toy.train.iterations == 2000
    assert toy.train.lora_mode == "full"
    paper = load_config(None, "paper-geometry")
    assert (paper.data.lr_size, paper.data.ref_size) == (64, 512)
    assert paper.train.lora_mode == "lora"
    assert set(PRESETS) == {"toy", "paper-geometry"}
    with pytest.raises(ConfigError):
        load_config(None, "nope")


def test_precedence_flag_over_file_over_preset(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  iterations: 10\n  batch_size: 2\n", encoding="utf-8")
    cfg = load_config(path, "toy", ["train.iterations=5"])
    assert cfg.train.iterations == 5
    assert cfg.train.batch_size == 2
    assert cfg.data.lr_size == 32


def test_parse_override():
    assert parse_override("train.seed=7") == {"train": {"seed": 7}}
    assert parse_override("data.warp.tx=[-0.1, 0.1]") == {"data": {"warp": {"tx": [-0.1, 0.1]}}}
    with pytest.raises(ConfigError):
        parse_override("seed=7")
    with pytest.raises(ConfigError):
        parse_override("train.seed")


def test_config_root_must_be_mapping(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_save_config_round_trip(tmp_path):
    cfg = load_config(None, "toy", ["train.seed=3"])
    save_config(cfg, tmp_path / "out" / "config.yaml")
    assert load_config(tmp_path / "out" / "config.yaml", "paper-geometry") == cfg


def test_config_hash():
    a = load_config(None, "toy")
    b = load_config(None, "toy")
    c = load_config(None, "toy", ["train.seed=1"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a).startswith("sha256:")
    assert config_hash(a) != config_hash(c)
    assert len(short_hash(a)) == 16
    assert config_hash(a.to_dict()) == config_hash(a)


def test_thread_count(monkeypatch):
    monkeypatch.setenv("THREEMTI_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("THREEMTI_THREADS", "0")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.setenv("THREEMTI_THREADS", "many")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.delenv("THREEMTI_THREADS")
    assert 1 <= thread_count() <= 8


def test_base_config_sits_under_every_layer():
    base = load_config(None, "toy", ["unet.heads=8", "train.seed=4"]).to_dict()
    cfg = load_config(None, None, ["eval.warp_test=true"], base=base)
    assert cfg.unet.heads == 8
    assert cfg.train.seed == 4
    assert cfg.eval.warp_test is True
    assert load_config(None, "paper-geometry", base=base).unet.heads == 8
    assert load_config(None, None) == load_config(None, "paper-geometry")
