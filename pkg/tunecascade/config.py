"""
Run configuration.

A tree of dataclasses turned into an OmegaConf structured config. Defaults
are the full-scale values; ``preset="tiny"`` swaps in desk-scale values that
keep every structural relation (latent alignment, divisibility) intact.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterator, List, Mapping, Optional, Union

import yaml
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .corpus import PromptSpec
from .errors import ConfigError
from .unet import UNetConfig

logger = logging.getLogger(__name__)

PRESETS = ("full", "tiny")


@dataclass
class AudioConfig:
    sample_rate: int = 48000
    channels: int = 2


@dataclass
class StftConfig:
    n_fft: int = 1024
    hop: int = 256


@dataclass
class Stage1Config:
    latent_channels: int = 32
    compression: int = 64
    encoder_channels: List[int] = field(default_factory=lambda: [512, 256])
    magnitude_scale: float = 1.0
    crop_length: int = 2**18
    decoder: UNetConfig = field(default_factory=UNetConfig.dmae_decoder)


@dataclass
class Stage2Config:
    crop_length: int = 2**21
    cfg_drop_prob: float = 0.1
    embedder_seed: int = 0
    generator: UNetConfig = field(default_factory=UNetConfig.tcld_generator)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 1e-3
    clip_norm: float = 1.0


@dataclass
class EmaConfig:
    beta: float = 0.995
    power: float = 0.7


@dataclass
class SamplingConfig:
    steps_gen: int = 100
    steps_dec: int = 100
    cfg_scale: float = 3.0
    clamp_latent: bool = True


@dataclass
class TrainLoopConfig:
    batch_size: int = 32
    steps: int = 1_000_000
    checkpoint_every: int = 10_000


@dataclass
class RunConfig:
    seed: int = 0
    audio: AudioConfig = field(default_factory=AudioConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    prompt: PromptSpec = field(default_factory=PromptSpec)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)


def tiny_config() -> RunConfig:
    """Desk-scale preset: mono 8 kHz, 2^14-sample crops, 8-channel latent, 16x compression."""
    return RunConfig(
        audio=AudioConfig(sample_rate=8000, channels=1),
        stft=StftConfig(n_fft=256, hop=64),
        stage1=Stage1Config(
            latent_channels=8,
            compression=16,
            encoder_channels=[64, 32],
            crop_length=2**14,
            decoder=UNetConfig(
                in_channels=1,
                channels=[8, 16, 32, 64],
                factors=[1, 4, 4, 8],
                item_repeats=[1, 1, 1, 1],
                use_attention=[False] * 4,
                use_cross_attention=[False] * 4,
                inject_depth=3,
                inject_channels=8,
                modulation_features=32,
            ),
        ),
        stage2=Stage2Config(
            crop_length=2**14,
            generator=UNetConfig(
                in_channels=8,
                channels=[32, 64, 64],
                factors=[1, 2, 2],
                item_repeats=[1, 1, 1],
                use_attention=[False, True, True],
                use_cross_attention=[True, True, True],
                attention_heads=4,
                attention_head_features=16,
                context_features=32,
                modulation_features=64,
            ),
        ),
        train=TrainLoopConfig(batch_size=8, steps=2000, checkpoint_every=500),
    )


def preset_config(preset: str = "full") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError([f"unknown preset '{preset}', expected one of {', '.join(PRESETS)}"])
    return tiny_config() if preset == "tiny" else RunConfig()


def frame_reduction(cfg: RunConfig) -> Fraction:
    """STFT frames per latent frame implied by the compression ratio."""
    return Fraction(
        cfg.stage1.compression * cfg.stage1.latent_channels,
        cfg.audio.channels * cfg.stft.hop,
    )


def latent_hop(cfg: RunConfig) -> int:
    """Waveform samples per latent frame."""
    return int(cfg.stft.hop * frame_reduction(cfg))


def _is_power_of_two(n: Union[int, Fraction]) -> bool:
    if isinstance(n, Fraction):
        if n.denominator != 1:
            return False
        n = n.numerator
    return n >= 1 and not n & (n - 1)


def config_problems(cfg: RunConfig) -> List[str]:
    """Every semantic problem in ``cfg``; empty when the configuration is usable."""
    problems: List[str] = []
    audio, stft, s1, s2 = cfg.audio, cfg.stft, cfg.stage1, cfg.stage2

    if audio.channels < 1:
        problems.append("audio.channels must be positive")
    if audio.sample_rate < 1:
        problems.append("audio.sample_rate must be positive")
    if not _is_power_of_two(stft.n_fft):
        problems.append(f"stft.n_fft {stft.n_fft} is not a power of two")
    if stft.hop < 1 or stft.n_fft % max(stft.hop, 1):
        problems.append(f"stft.hop {stft.hop} must divide stft.n_fft {stft.n_fft}")
    elif stft.n_fft // stft.hop < 3:
        problems.append("stft.n_fft / stft.hop must be at least 3 for overlap-add")

    problems.extend(s1.decoder.problems("stage1.decoder."))
    problems.extend(s2.generator.problems("stage2.generator."))
    if problems:
        return problems

    reduction = frame_reduction(cfg)
    if not _is_power_of_two(reduction):
        problems.append(
            f"stage1.compression {s1.compression} gives a frame reduction of {reduction}, "
            "which is not a power of two"
        )
    elif len(s1.encoder_channels) < 1 or any(c < 1 for c in s1.encoder_channels):
        problems.append("stage1.encoder_channels needs at least one positive width")
    else:
        hop = latent_hop(cfg)
        dec = s1.decoder
        if dec.in_channels != audio.channels:
            problems.append(f"stage1.decoder.in_channels must equal audio.channels ({audio.channels})")
        if dec.inject_depth is None:
            problems.append("stage1.decoder.inject_depth is required")
        else:
            if dec.inject_channels != s1.latent_channels:
                problems.append(
                    f"stage1.decoder.inject_channels must equal stage1.latent_channels ({s1.latent_channels})"
                )
            inject_factor = math.prod(dec.factors[: dec.inject_depth + 1])
            if hop % inject_factor:
                problems.append(
                    f"latent frames ({hop} samples) do not align with decoder depth "
                    f"{dec.inject_depth} ({inject_factor} samples)"
                )
        unit = math.lcm(hop, dec.total_factor)
        if s1.crop_length % unit or s1.crop_length < stft.n_fft:
            problems.append(f"stage1.crop_length {s1.crop_length} must be a multiple of {unit} and >= n_fft")

        gen = s2.generator
        if gen.in_channels != s1.latent_channels:
            problems.append(f"stage2.generator.in_channels must equal stage1.latent_channels ({s1.latent_channels})")
        if not gen.uses_cross_attention:
            problems.append("stage2.generator needs cross-attention for text conditioning")
        if s2.crop_length % hop or (s2.crop_length // hop) % gen.total_factor:
            problems.append(
                f"stage2.crop_length {s2.crop_length} must give a latent length divisible by "
                f"{gen.total_factor}"
            )

    for name, p in (
        ("stage2.cfg_drop_prob", s2.cfg_drop_prob),
        ("prompt.drop_prob", cfg.prompt.drop_prob),
        ("prompt.comma_prob", cfg.prompt.comma_prob),
    ):
        if not 0.0 <= p <= 1.0:
            problems.append(f"{name} {p} outside [0, 1]")
    if cfg.sampling.steps_gen < 1 or cfg.sampling.steps_dec < 1:
        problems.append("sampling step counts must be positive")
    if cfg.sampling.cfg_scale < 0:
        problems.append("sampling.cfg_scale must be >= 0")
    if not 0.0 <= cfg.ema.beta < 1.0 or cfg.ema.power <= 0:
        problems.append("ema.beta must lie in [0, 1) and ema.power must be positive")
    if cfg.optim.lr <= 0 or cfg.optim.eps <= 0 or cfg.optim.weight_decay < 0:
        problems.append("optim.lr and optim.eps must be positive, optim.weight_decay non-negative")
    if cfg.train.batch_size < 1 or cfg.train.steps < 0 or cfg.train.checkpoint_every < 0:
        problems.append("train.batch_size must be positive, train.steps and checkpoint_every non-negative")
    return problems


def _unknown_keys(doc: Any, schema: DictConfig, prefix: str = "") -> Iterator[str]:
    if not isinstance(doc, Mapping):
        return
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            yield path
        elif isinstance(value, Mapping):
            node = schema.get(key)
            if isinstance(node, DictConfig):
                yield from _unknown_keys(value, node, f"{path}.")


def config_from_container(doc: Optional[Mapping[str, Any]], preset: str = "full") -> RunConfig:
    """Merge a plain mapping over a preset, listing every unknown key and problem."""
    schema = OmegaConf.structured(preset_config(preset))
    problems = [f"unknown key '{key}'" for key in _unknown_keys(doc or {}, schema)]
    if problems:
        raise ConfigError(problems)
    try:
        merged = OmegaConf.merge(schema, OmegaConf.create(dict(doc or {})))
        cfg: RunConfig = OmegaConf.to_object(merged)  # type: ignore[assignment]
    except OmegaConfBaseException as e:
        raise ConfigError([str(e).splitlines()[0]]) from e
    problems = config_problems(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def config_from_yaml(text: str, preset: str = "full") -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"config is not valid YAML: {e}"]) from e
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigError(["config document must be a mapping"])
    return config_from_container(doc, preset)


def load_config(path: Optional[Union[str, Path]] = None, preset: str = "full") -> RunConfig:
    """Preset defaults overlaid with the YAML file at ``path`` (if any)."""
    if path is None:
        cfg = preset_config(preset)
        problems = config_problems(cfg)
        if problems:
            raise ConfigError(problems)
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError([f"cannot read config '{path}': {e.strerror or e}"]) from e
    cfg = config_from_yaml(text, preset)
    logger.info("loaded config %s (preset %s)", path, preset)
    return cfg


def config_to_container(cfg: RunConfig) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(cfg))  # type: ignore[return-value]


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`config_from_yaml` turns back into an equal config."""
    return OmegaConf.to_yaml(OmegaConf.structured(cfg))
