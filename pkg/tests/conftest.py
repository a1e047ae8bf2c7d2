from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest
import torch

from tunecascade.audio import Waveform, write_wav
from tunecascade.config import RunConfig, tiny_config
from tunecascade.layers import GradTape, ParamStore, backward
from tunecascade.unet import UNetConfig


@pytest.fixture
def tiny() -> RunConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def micro_unet() -> UNetConfig:
    """Smallest configuration that still exercises every item kind."""
    return UNetConfig(
        in_channels=1,
        channels=[4, 8],
        factors=[1, 2],
        item_repeats=[1, 1],
        use_attention=[False, True],
        use_cross_attention=[False, True],
        inject_depth=0,
        inject_channels=2,
        attention_heads=2,
        attention_head_features=4,
        context_features=6,
        modulation_features=8,
        sinusoidal_features=8,
    )


def perturb(module: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> None:
    """Move every parameter away from its (often zero) initial value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


@pytest.fixture
def perturbed() -> Callable[..., None]:
    return perturb


@pytest.fixture
def fd_check() -> Callable[..., float]:
    """
    Compare tape gradients with central finite differences on randomly
    chosen scalar entries; returns the largest absolute discrepancy.
    """

    def check(
        loss_fn: Callable[[], torch.Tensor],
        params: ParamStore,
        count: int = 20,
        h: float = 1e-6,
        rtol: float = 1e-5,
        atol: float = 1e-8,
        seed: int = 0,
    ) -> float:
        params.clear_grads()
        tape = GradTape(params)
        with tape:
            loss = loss_fn()
        backward(tape, loss)
        analytic = {
            n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()
        }
        params.clear_grads()

        picker = np.random.default_rng(seed)
        names = list(params)
        worst = 0.0
        with torch.no_grad():
            for _ in range(count):
                name = names[int(picker.integers(len(names)))]
                flat = params[name].view(-1)
                i = int(picker.integers(flat.numel()))
                original = flat[i].item()
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                exact = analytic[name].view(-1)[i].item()
                error = abs(exact - numeric)
                assert error <= rtol * max(abs(exact), abs(numeric)) + atol, (name, i, exact, numeric)
                worst = max(worst, error)
        return worst

    return check


def sine(freq: float, length: int, sample_rate: int, amplitude: float = 0.5, channels: int = 1) -> Waveform:
    t = np.arange(length) / sample_rate
    samples = amplitude * np.sin(2 * np.pi * freq * t)
    return Waveform(np.tile(samples.astype(np.float32), (channels, 1)), sample_rate)


@pytest.fixture
def make_sine() -> Callable[..., Waveform]:
    return sine


@pytest.fixture
def tone_corpus(tmp_path: Path, tiny: RunConfig) -> Callable[..., Path]:
    """Writes tone WAVs plus a manifest; returns the manifest path."""

    def build(count: int = 8, seconds_of_crops: int = 1, crop_length: int = 0) -> Path:
        sr = tiny.audio.sample_rate
        length = (crop_length or tiny.stage1.crop_length) * seconds_of_crops
        lines: List[str] = []
        for i in range(count):
            path = tmp_path / f"tone{i}.wav"
            write_wav(path, sine(110.0 * (i + 1), length, sr))
            lines.append(f"{path.name}\tTone {i}\tSynth\tTest Tones\tAmbient\t202{i}")
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest

    return build
