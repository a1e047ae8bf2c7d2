"""
Recursive 1D U-Net.

Each depth is a ``UNetBlock``: a resampling step, a run of items on the way
down, the next block nested inside, a skip merge, a run of items on the way
up and the inverse resampling step. An item is

    R (ResNet) -> M (modulation by noise level) -> I (inject, decoder only)
      -> A (self-attention) -> C (cross-attention)

with I/A/C present only where the configuration enables them.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .layers import (
    Conv1d,
    CrossAttention,
    Downsample,
    Modulation,
    NoiseFeatures,
    ParamStore,
    SelfAttention,
    Upsample,
    group_norm,
    zero_init,
)

logger = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    in_channels: int = 1
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    factors: List[int] = field(default_factory=lambda: [1, 2, 2])
    item_repeats: List[int] = field(default_factory=lambda: [1, 1, 1])
    use_attention: List[bool] = field(default_factory=lambda: [False, False, False])
    use_cross_attention: List[bool] = field(default_factory=lambda: [False, False, False])
    inject_depth: Optional[int] = None
    inject_channels: int = 0
    attention_heads: int = 12
    attention_head_features: int = 64
    context_features: int = 0
    modulation_features: int = 64
    sinusoidal_features: int = 64

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def total_factor(self) -> int:
        return math.prod(self.factors)

    @property
    def uses_cross_attention(self) -> bool:
        return any(self.use_cross_attention)

    def resolution(self, length: int, depth: int) -> int:
        """Sequence length seen by the items at ``depth`` for an input of ``length``."""
        return length // math.prod(self.factors[: depth + 1])

    def problems(self, prefix: str = "") -> List[str]:
        found = []
        lists = {
            "channels": self.channels,
            "factors": self.factors,
            "item_repeats": self.item_repeats,
            "use_attention": self.use_attention,
            "use_cross_attention": self.use_cross_attention,
        }
        lengths = {name: len(values) for name, values in lists.items()}
        if not self.channels:
            found.append(f"{prefix}channels must not be empty")
        if len(set(lengths.values())) > 1:
            found.append(f"{prefix}per-depth lists have inconsistent lengths {lengths}")
        if any(c < 1 for c in self.channels):
            found.append(f"{prefix}channels must be positive")
        if any(f < 1 for f in self.factors):
            found.append(f"{prefix}factors must be >= 1")
        if any(r < 1 for r in self.item_repeats):
            found.append(f"{prefix}item_repeats must be >= 1")
        if self.in_channels < 1:
            found.append(f"{prefix}in_channels must be positive")
        if self.inject_depth is not None:
            if not 0 <= self.inject_depth < len(self.channels):
                found.append(f"{prefix}inject_depth {self.inject_depth} outside 0..{len(self.channels) - 1}")
            if self.inject_channels < 1:
                found.append(f"{prefix}inject_depth requires inject_channels > 0")
        if any(self.use_attention) or self.uses_cross_attention:
            if self.attention_heads < 1 or self.attention_head_features < 1:
                found.append(f"{prefix}attention needs positive heads and head features")
        if self.uses_cross_attention and self.context_features < 1:
            found.append(f"{prefix}cross-attention requires context_features > 0")
        return found

    def validate(self) -> "UNetConfig":
        found = self.problems()
        if found:
            raise ConfigError(found)
        return self

    @classmethod
    def tiny(cls) -> "UNetConfig":
        return cls()

    @classmethod
    def dmae_decoder(cls) -> "UNetConfig":
        """Full-scale stage-1 decoder: stereo waveform, latent injected at depth 4."""
        return cls(
            in_channels=2,
            channels=[256, 512, 512, 512, 1024, 1024, 1024],
            factors=[1, 2, 2, 2, 2, 2, 2],
            item_repeats=[1, 2, 2, 2, 2, 2, 2],
            use_attention=[False] * 7,
            use_cross_attention=[False] * 7,
            inject_depth=4,
            inject_channels=32,
            modulation_features=1024,
        )

    @classmethod
    def tcld_generator(cls) -> "UNetConfig":
        """Full-scale stage-2 generator over the 32-channel latent."""
        return cls(
            in_channels=32,
            channels=[128, 256, 512, 512, 1024, 1024],
            factors=[1, 2, 2, 2, 2, 2],
            item_repeats=[2, 2, 2, 4, 8, 8],
            use_attention=[False, False, True, True, True, True],
            use_cross_attention=[True] * 6,
            attention_heads=12,
            attention_head_features=64,
            context_features=768,
            modulation_features=1024,
        )


class ResnetItem(nn.Module):
    """conv3 -> norm -> SiLU -> conv3 (zero-initialized) plus the shortcut."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = Conv1d(in_channels, out_channels, 3, padding=1)
        self.norm = group_norm(out_channels)
        self.conv2 = zero_init(Conv1d(out_channels, out_channels, 3, padding=1))
        self.shortcut = Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(nn.functional.silu(self.norm(self.conv1(x))))
        return (x if self.shortcut is None else self.shortcut(x)) + h


class InjectItem(nn.Module):
    """Concatenates an external tensor onto the channels, then projects back."""

    def __init__(self, channels: int, inject_channels: int):
        super().__init__()
        self.inject_channels = inject_channels
        self.proj = Conv1d(channels + inject_channels, channels, 1)

    def forward(self, x: Tensor, inject: Optional[Tensor]) -> Tensor:
        if inject is None:
            raise ShapeError("inject item reached without an inject tensor")
        if inject.ndim != 3 or inject.shape[0] != x.shape[0] or inject.shape[1] != self.inject_channels:
            raise ShapeError(
                f"inject tensor {tuple(inject.shape)} must be [{x.shape[0]}, {self.inject_channels}, L]"
            )
        length, inject_length = x.shape[-1], inject.shape[-1]
        if inject_length > length or length % inject_length:
            raise ShapeError(
                f"inject length {inject_length} is not an integer divisor of the depth's length {length}"
            )
        inject = inject.to(x.dtype).repeat_interleave(length // inject_length, dim=-1)
        return self.proj(torch.cat([x, inject], dim=1))


class AttentionItem(nn.Module):
    def __init__(self, channels: int, heads: int, head_features: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.attention = SelfAttention(channels, heads, head_features)
        zero_init(self.attention.to_out)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x).transpose(1, 2)
        return x + self.attention(h).transpose(1, 2)


class CrossAttentionItem(nn.Module):
    def __init__(self, channels: int, context_features: int, heads: int, head_features: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.attention = CrossAttention(channels, context_features, heads, head_features)
        zero_init(self.attention.to_out)

    def forward(self, x: Tensor, context: Tensor, context_mask: Optional[Tensor]) -> Tensor:
        h = self.norm(x).transpose(1, 2)
        return x + self.attention(h, context, context_mask).transpose(1, 2)


class UNetItem(nn.Module):
    def __init__(self, config: UNetConfig, depth: int, inject: bool = False):
        super().__init__()
        channels = config.channels[depth]
        heads, head_features = config.attention_heads, config.attention_head_features
        self.resnet = ResnetItem(channels, channels)
        self.modulation = Modulation(channels, config.modulation_features)
        self.inject = InjectItem(channels, config.inject_channels) if inject else None
        self.attention = (
            AttentionItem(channels, heads, head_features) if config.use_attention[depth] else None
        )
        self.cross_attention = (
            CrossAttentionItem(channels, config.context_features, heads, head_features)
            if config.use_cross_attention[depth]
            else None
        )

    def forward(
        self,
        x: Tensor,
        features: Tensor,
        inject: Optional[Tensor] = None,
        context: Optional[Tensor] = None,
        context_mask: Optional[Tensor] = None,
    ) -> Tensor:
        x = self.modulation(self.resnet(x), features)
        if self.inject is not None:
            x = self.inject(x, inject)
        if self.attention is not None:
            x = self.attention(x)
        if self.cross_attention is not None:
            x = self.cross_attention(x, context, context_mask)
        return x


class UNetBlock(nn.Module):
    def __init__(self, config: UNetConfig, depth: int, in_channels: int):
        super().__init__()
        channels, factor = config.channels[depth], config.factors[depth]
        repeats = config.item_repeats[depth]
        self.depth = depth
        self.downsample = Downsample(in_channels, channels, factor)
        self.down_items = nn.ModuleList(UNetItem(config, depth) for _ in range(repeats))
        self.inner = UNetBlock(config, depth + 1, channels) if depth + 1 < config.depth else None
        self.merge = Conv1d(2 * channels, channels, 1) if self.inner is not None else None
        self.up_items = nn.ModuleList(
            UNetItem(config, depth, inject=depth == config.inject_depth and i == 0)
            for i in range(repeats)
        )
        self.upsample = Upsample(channels, in_channels, factor)

    def forward(
        self,
        x: Tensor,
        features: Tensor,
        inject: Optional[Tensor],
        context: Optional[Tensor],
        context_mask: Optional[Tensor],
    ) -> Tensor:
        x = self.downsample(x)
        for item in self.down_items:
            x = item(x, features, context=context, context_mask=context_mask)
        if self.inner is not None:
            skip = x
            x = self.inner(x, features, inject, context, context_mask)
            x = self.merge(torch.cat([x, skip], dim=1))
        for item in self.up_items:
            x = item(x, features, inject=inject, context=context, context_mask=context_mask)
        return self.upsample(x)


class UNetModel(nn.Module):
    """Shape-preserving denoiser ``f(x, sigma; inject, context)``."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config.validate()
        self.noise_features = NoiseFeatures(config.modulation_features, config.sinusoidal_features)
        self.block = UNetBlock(config, 0, config.in_channels)

    def forward(
        self,
        x: Tensor,
        sigma,
        inject: Optional[Tensor] = None,
        context: Optional[Tensor] = None,
        context_mask: Optional[Tensor] = None,
    ) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected [batch, {cfg.in_channels}, length], got {tuple(x.shape)}")
        if x.shape[-1] % cfg.total_factor:
            raise ShapeError(f"length {x.shape[-1]} not divisible by total factor {cfg.total_factor}")
        if (inject is None) != (cfg.inject_depth is None):
            raise ShapeError(
                "inject tensor is required exactly when the configuration declares an inject depth"
            )
        if (context is None) == cfg.uses_cross_attention:
            raise ShapeError("context is required exactly when cross-attention is enabled")

        if not isinstance(sigma, Tensor):
            sigma = torch.full((x.shape[0],), float(sigma), dtype=x.dtype, device=x.device)
        elif sigma.numel() == 1:
            sigma = sigma.reshape(1).expand(x.shape[0])
        features = self.noise_features(sigma.to(x.dtype))
        return self.block(x, features, inject, context, context_mask)

    @property
    def params(self) -> ParamStore:
        return ParamStore.from_module(self)


def build(config: UNetConfig, seed: int = 0) -> UNetModel:
    """Deterministically initialized model: same config and seed, same parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNetModel(config)
    logger.info("built U-Net (%d depths) with %d parameters", config.depth, param_count(model))
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def meta_param_count(config: UNetConfig) -> int:
    """Parameter count of a configuration without allocating its weights."""
    with torch.device("meta"):
        model = UNetModel(config)
    count = param_count(model)
    logger.info("configuration with %d depths has %d parameters", config.depth, count)
    return count
