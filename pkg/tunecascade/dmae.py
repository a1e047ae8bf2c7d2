"""
Stage 1: the diffusion magnitude autoencoder.

The encoder sees only STFT magnitudes (log-compressed, frequencies as
channels) and squeezes them through strided convolutions into a
tanh-bounded latent. The decoder is a waveform-domain diffusion U-Net that
receives the latent through its inject item and renders audio, phase
included, by DDIM sampling.
"""

import logging
import math
from fractions import Fraction
from typing import List, Optional, Union

import numpy as np
import torch
from torch import Tensor, nn

from .audio import Spectrogram, Waveform, flatten_freq, stft
from .config import RunConfig, frame_reduction
from .diffusion import SamplerSchedule, sample, v_loss
from .errors import ConfigError, LatentMismatchError, ShapeError
from .layers import Conv1d, Downsample, GradTape, ParamStore, backward, group_norm
from .unet import ResnetItem, UNetModel, param_count

logger = logging.getLogger(__name__)


class MagnitudeEncoder(nn.Module):
    """[b, c * bins, frames] magnitudes -> [b, latent_channels, frames / 2**stages] in [-1, 1]."""

    def __init__(self, in_channels: int, widths: List[int], stages: int, latent_channels: int):
        super().__init__()
        self.stem = Conv1d(in_channels, widths[0], 3, padding=1)
        blocks: List[nn.Module] = []
        channels = widths[0]
        for i in range(stages):
            out = widths[min(i + 1, len(widths) - 1)]
            blocks += [ResnetItem(channels, channels), Downsample(channels, out, 2)]
            channels = out
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(
            group_norm(channels),
            nn.SiLU(),
            Conv1d(channels, latent_channels, 3, padding=1),
        )

    def forward(self, features: Tensor) -> Tensor:
        return torch.tanh(self.head(self.blocks(self.stem(features))))


class DmaeModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        reduction = frame_reduction(cfg)
        if reduction.denominator != 1 or reduction.numerator & (reduction.numerator - 1):
            raise ConfigError([f"frame reduction {reduction} is not a power of two"])
        self.run_config = cfg
        self.channels = cfg.audio.channels
        self.sample_rate = cfg.audio.sample_rate
        self.n_fft = cfg.stft.n_fft
        self.hop = cfg.stft.hop
        self.latent_channels = cfg.stage1.latent_channels
        self.compression = cfg.stage1.compression
        self.magnitude_scale = cfg.stage1.magnitude_scale
        self.frame_reduction = int(reduction)
        self.latent_hop = self.hop * self.frame_reduction

        self.encoder = MagnitudeEncoder(
            self.channels * (self.n_fft // 2),
            list(cfg.stage1.encoder_channels),
            int(math.log2(self.frame_reduction)),
            self.latent_channels,
        )
        self.decoder = UNetModel(cfg.stage1.decoder)

    @property
    def params(self) -> ParamStore:
        return ParamStore.from_module(self)

    def latent_length(self, length: int) -> int:
        if length % self.latent_hop or length < self.n_fft:
            raise ShapeError(
                f"waveform length {length} must be a multiple of {self.latent_hop} and >= {self.n_fft}"
            )
        return length // self.latent_hop

    def denoise(self, x: Tensor, sigma: Tensor, z: Tensor) -> Tensor:
        return self.decoder(x, sigma, inject=z)

    def spectrogram_features(self, spectrograms: List[Spectrogram], dtype: torch.dtype) -> Tensor:
        rows = np.stack([flatten_freq(s) for s in spectrograms])
        features = torch.from_numpy(np.log1p(rows)).to(dtype)
        return features * self.magnitude_scale

    def magnitude_features(self, waveforms: Tensor) -> Tensor:
        """Log-compressed magnitude rows for a [b, c, t] batch; phase is never kept."""
        np_dtype = np.float64 if waveforms.dtype == torch.float64 else np.float32
        batch = waveforms.detach().cpu().numpy()
        spectrograms = [
            stft(Waveform(w, self.sample_rate), self.n_fft, self.hop, dtype=np_dtype) for w in batch
        ]
        return self.spectrogram_features(spectrograms, waveforms.dtype)


def build_dmae(cfg: RunConfig, seed: int = 0) -> DmaeModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DmaeModel(cfg)
    logger.info(
        "built stage-1 autoencoder: %d encoder + %d decoder parameters, latent %d ch every %d samples",
        param_count(model.encoder),
        param_count(model.decoder),
        model.latent_channels,
        model.latent_hop,
    )
    return model


def _as_batch(m: DmaeModel, w: Union[Waveform, Tensor]) -> Tensor:
    if isinstance(w, Waveform):
        if w.sample_rate != m.sample_rate:
            raise ShapeError(f"sample rate {w.sample_rate} does not match the model's {m.sample_rate}")
        w = torch.from_numpy(np.ascontiguousarray(w.samples, dtype=np.float32))[None]
    if w.ndim != 3 or w.shape[1] != m.channels:
        raise ShapeError(f"expected [batch, {m.channels}, length], got {tuple(w.shape)}")
    return w


def encode(m: DmaeModel, w: Union[Waveform, Tensor]) -> Tensor:
    """Latent ``z`` [b, latent_channels, t / latent_hop], every element in [-1, 1]."""
    batch = _as_batch(m, w)
    m.latent_length(batch.shape[-1])
    return m.encoder(m.magnitude_features(batch))


def encode_spectrogram(m: DmaeModel, spectrograms: List[Spectrogram]) -> Tensor:
    """Encode from precomputed spectrograms; only their magnitudes are read."""
    for s in spectrograms:
        if s.channels != m.channels or s.n_fft != m.n_fft or s.hop != m.hop:
            raise ShapeError("spectrogram does not match the model's channel count or STFT settings")
        m.latent_length(s.length)
    return m.encoder(m.spectrogram_features(spectrograms, torch.float32))


def decode(
    m: DmaeModel, z: Tensor, noise: Tensor, steps: int, progress: bool = False
) -> Tensor:
    """DDIM-render a [b, c, t] waveform batch from latents ``z`` and starting ``noise``."""
    if z.ndim != 3 or z.shape[1] != m.latent_channels:
        raise LatentMismatchError(
            f"latent {tuple(z.shape)} does not have the decoder's {m.latent_channels} channels"
        )
    expected = (z.shape[0], m.channels, z.shape[-1] * m.latent_hop)
    if tuple(noise.shape) != expected:
        raise ShapeError(f"decoder noise must be {expected}, got {tuple(noise.shape)}")
    return sample(m.denoise, noise, SamplerSchedule.linear(steps), z.to(noise.dtype), progress=progress)


def train_step_stage1(
    m: DmaeModel,
    batch: Tensor,
    generator: torch.Generator,
    tape: Optional[GradTape] = None,
) -> Tensor:
    """
    One joint encoder/decoder step: v-loss of the decoder conditioned on
    ``encode(batch)``. Gradients are left in the parameters' ``.grad``.
    """
    tape = tape or GradTape(m.params)
    b = batch.shape[0]
    with tape:
        z = encode(m, batch)
        sigma = torch.rand(b, generator=generator, dtype=batch.dtype)
        eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
        loss = v_loss(m.denoise, batch, eps, sigma, z)
    backward(tape, loss)
    return loss.detach()


def compression_ratio(channels: int, length: int, latent_channels: int, latent_length: int) -> Fraction:
    """Input values per latent value, ``c * t / (C_z * L)``."""
    return Fraction(channels * length, latent_channels * latent_length)
