import pytest

from tunecascade.config import (
    RunConfig,
    config_from_container,
    config_from_yaml,
    config_problems,
    dump_config,
    load_config,
    preset_config,
    tiny_config,
)
from tunecascade.errors import ConfigError
from tunecascade.unet import UNetConfig


def test_full_scale_defaults():
    cfg = RunConfig()
    assert (cfg.audio.sample_rate, cfg.audio.channels) == (48000, 2)
    assert (cfg.stft.n_fft, cfg.stft.hop) == (1024, 256)
    assert (cfg.stage1.latent_channels, cfg.stage1.compression) == (32, 64)
    assert cfg.stage1.crop_length == 2**18 and cfg.stage2.crop_length == 2**21
    assert cfg.stage2.cfg_drop_prob == 0.1
    o = cfg.optim
    assert (o.lr, o.beta1, o.beta2, o.eps, o.weight_decay) == (1e-4, 0.95, 0.999, 1e-6, 1e-3)
    assert (cfg.ema.beta, cfg.ema.power) == (0.995, 0.7)
    assert (cfg.sampling.steps_gen, cfg.sampling.steps_dec, cfg.sampling.cfg_scale) == (100, 100, 3.0)
    assert cfg.train.batch_size == 32
    assert (cfg.prompt.drop_prob, cfg.prompt.comma_prob) == (0.1, 0.5)


def test_full_scale_networks():
    dec = RunConfig().stage1.decoder
    assert dec.channels == [256, 512, 512, 512, 1024, 1024, 1024]
    assert dec.factors == [1, 2, 2, 2, 2, 2, 2]
    assert dec.item_repeats == [1, 2, 2, 2, 2, 2, 2]
    assert dec.inject_depth == 4 and dec.inject_channels == 32
    gen = RunConfig().stage2.generator
    assert gen.channels == [128, 256, 512, 512, 1024, 1024]
    assert gen.item_repeats == [2, 2, 2, 4, 8, 8]
    assert gen.use_attention == [False, False, True, True, True, True]
    assert all(gen.use_cross_attention)
    assert (gen.attention_heads, gen.attention_head_features, gen.context_features) == (12, 64, 768)


@pytest.mark.parametrize("preset", ["full", "tiny"])
def test_presets_are_consistent(preset):
    assert config_problems(preset_config(preset)) == []


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_config("huge")


@pytest.mark.parametrize("cfg", [RunConfig(), tiny_config()], ids=["full", "tiny"])
def test_dump_and_load_round_trip(cfg):
    text = dump_config(cfg)
    assert config_from_yaml(text) == cfg
    assert config_from_yaml(text, "tiny") == cfg


def test_partial_override_keeps_preset(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 9\nsampling:\n  cfg_scale: 5.0\n", encoding="utf-8")
    cfg = load_config(path, "tiny")
    assert cfg.seed == 9 and cfg.sampling.cfg_scale == 5.0
    assert cfg.stft.n_fft == 256


def test_unknown_keys_are_listed_together():
    with pytest.raises(ConfigError) as info:
        config_from_yaml("nope: 1\nstage1:\n  bogus: 2\n  decoder:\n    depthh: 3\n")
    message = str(info.value)
    assert "'nope'" in message and "'stage1.bogus'" in message and "'stage1.decoder.depthh'" in message
    assert len(info.value.problems) == 3


def test_semantic_problems_are_listed_together():
    with pytest.raises(ConfigError) as info:
        config_from_container({"stft": {"n_fft": 1000}, "stage1": {"decoder": {"factors": [1, 2]}}})
    assert any("n_fft" in p for p in info.value.problems)
    assert any("inconsistent" in p for p in info.value.problems)


def test_later_problems_are_collected():
    with pytest.raises(ConfigError) as info:
        config_from_container(
            {"stage2": {"cfg_drop_prob": 1.5}, "sampling": {"steps_gen": 0}, "optim": {"lr": -1.0}}
        )
    assert len(info.value.problems) == 3


def test_power_of_two_reduction():
    with pytest.raises(ConfigError, match="power of two"):
        config_from_container({"stage1": {"compression": 48}})


def test_type_errors_are_config_errors():
    with pytest.raises(ConfigError):
        config_from_yaml("stft:\n  n_fft: many\n")


def test_non_mapping_document():
    with pytest.raises(ConfigError):
        config_from_yaml("- 1\n- 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_config_error_is_a_usage_error():
    assert ConfigError(["x"]).exit_code == 1


def test_unet_tiny_preset_is_valid():
    assert UNetConfig.tiny().validate().depth == 3
