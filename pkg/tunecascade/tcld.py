"""
Stage 2: text-conditioned latent diffusion.

A frozen text embedder turns prompts into token sequences; the generator
U-Net denoises stage-1 latents while cross-attending to them. Conditioning
is randomly replaced by a learned null row during training so that the same
network also provides the unconditional prediction classifier-free guidance
extrapolates from.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import torch
from torch import Tensor, nn

from .config import RunConfig, latent_hop
from .diffusion import SamplerSchedule, sample, v_loss
from .dmae import DmaeModel, decode
from .errors import LatentMismatchError, ShapeError, UsageError
from .layers import GradTape, ParamStore, backward
from .unet import UNetModel, param_count

logger = logging.getLogger(__name__)

# (context [b, tokens, d], mask [b, tokens])
Context = Tuple[Tensor, Tensor]


@dataclass
class TextEmbedding:
    vectors: Tensor
    mask: Tensor

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ShapeError(f"embedding must be [tokens >= 1, features], got {tuple(self.vectors.shape)}")
        if self.mask.shape != self.vectors.shape[:1] or self.mask.dtype != torch.bool:
            raise ShapeError("embedding mask must be a boolean vector with one entry per token")

    @property
    def tokens(self) -> int:
        return self.vectors.shape[0]


class TextEmbedder(Protocol):
    """Frozen prompt encoder; a pretrained model plugs in here."""

    features: int

    def __call__(self, prompt: str) -> TextEmbedding: ...


class ToyEmbedder:
    """
    Byte-level lookup into a seed-generated frozen table.

    Rows 0..255 embed UTF-8 bytes; row 256 is the null row returned for "".
    """

    NULL_ROW = 256

    def __init__(self, features: int, seed: int = 0):
        if features < 1:
            raise UsageError(f"embedding width must be positive, got {features}")
        self.features = features
        generator = torch.Generator().manual_seed(seed)
        self.table = torch.randn(257, features, generator=generator)

    def __call__(self, prompt: str) -> TextEmbedding:
        tokens = list(prompt.encode("utf-8")) or [self.NULL_ROW]
        vectors = self.table[torch.tensor(tokens, dtype=torch.long)]
        return TextEmbedding(vectors, torch.ones(len(tokens), dtype=torch.bool))


def toy_embed(prompt: str, features: int, seed: int = 0) -> TextEmbedding:
    return ToyEmbedder(features, seed)(prompt)


def collate(embeddings: Sequence[TextEmbedding], dtype: torch.dtype = torch.float32) -> Context:
    """Right-pad a batch of embeddings with zero rows and False mask entries."""
    tokens = max(e.tokens for e in embeddings)
    features = embeddings[0].vectors.shape[1]
    context = torch.zeros(len(embeddings), tokens, features, dtype=dtype)
    mask = torch.zeros(len(embeddings), tokens, dtype=torch.bool)
    for i, e in enumerate(embeddings):
        if e.vectors.shape[1] != features:
            raise ShapeError("embeddings in a batch must share a feature width")
        context[i, : e.tokens] = e.vectors.to(dtype)
        mask[i, : e.tokens] = e.mask
    return context, mask


class TcldModel(nn.Module):
    def __init__(self, cfg: RunConfig, embedder: Optional[TextEmbedder] = None):
        super().__init__()
        generator = cfg.stage2.generator
        self.run_config = cfg
        self.generator = UNetModel(generator)
        self.null_embedding = nn.Parameter(torch.randn(generator.context_features) * 0.02)
        self.cfg_scale = cfg.sampling.cfg_scale
        self.drop_prob = cfg.stage2.cfg_drop_prob
        self.latent_channels = generator.in_channels
        self.latent_hop = latent_hop(cfg)
        self.latent_length = cfg.stage2.crop_length // self.latent_hop
        self.embedder: TextEmbedder = embedder or ToyEmbedder(
            generator.context_features, cfg.stage2.embedder_seed
        )
        if self.embedder.features != generator.context_features:
            raise ShapeError(
                f"embedder width {self.embedder.features} does not match context_features "
                f"{generator.context_features}"
            )

    @property
    def params(self) -> ParamStore:
        return ParamStore.from_module(self)

    def embed(self, prompts: Sequence[str], dtype: torch.dtype = torch.float32) -> Context:
        """Embed a batch of prompts; empty prompts get the learned null row used for guidance."""
        cond = collate([self.embedder(p) for p in prompts], dtype)
        empty = torch.tensor([not p for p in prompts], dtype=torch.bool)
        if empty.any():
            cond = self.drop_conditioning(cond, empty)
        return cond

    def null_context(self, batch: int, tokens: int = 1, dtype: Optional[torch.dtype] = None) -> Context:
        """The learned null row followed by masked zero padding."""
        null = self.null_embedding if dtype is None else self.null_embedding.to(dtype)
        context = torch.cat(
            [null.expand(batch, 1, -1), null.new_zeros(batch, tokens - 1, null.shape[0])], dim=1
        )
        mask = torch.zeros(batch, tokens, dtype=torch.bool)
        mask[:, 0] = True
        return context, mask

    def drop_conditioning(self, cond: Context, drop: Tensor) -> Context:
        context, mask = cond
        null_context, null_mask = self.null_context(context.shape[0], context.shape[1], context.dtype)
        return (
            torch.where(drop[:, None, None], null_context, context),
            torch.where(drop[:, None], null_mask, mask),
        )

    def denoise(self, x: Tensor, sigma: Tensor, cond: Context) -> Tensor:
        context, mask = cond
        return self.generator(x, sigma, context=context.to(x.dtype), context_mask=mask)


def build_tcld(cfg: RunConfig, seed: int = 0, embedder: Optional[TextEmbedder] = None) -> TcldModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TcldModel(cfg, embedder)
    logger.info(
        "built stage-2 generator with %d parameters over %d x %d latents",
        param_count(model),
        model.latent_channels,
        model.latent_length,
    )
    return model


def cfg_drop_mask(batch: int, prob: float, generator: torch.Generator) -> Tensor:
    """True for batch elements whose conditioning is replaced by the null row."""
    return torch.rand(batch, generator=generator) < prob


def train_step_stage2(
    m: TcldModel,
    latents: Tensor,
    prompts: Sequence[str],
    generator: torch.Generator,
    tape: Optional[GradTape] = None,
) -> Tensor:
    """
    One generator step: conditioning dropout, then the v-loss conditioned on
    the (possibly nulled) prompt embeddings. Draw order: drop mask, sigma, noise.
    """
    if latents.ndim != 3 or latents.shape[1] != m.latent_channels:
        raise LatentMismatchError(
            f"latents {tuple(latents.shape)} do not have the generator's {m.latent_channels} channels"
        )
    if len(prompts) != latents.shape[0]:
        raise ShapeError(f"{len(prompts)} prompts for {latents.shape[0]} latents")
    tape = tape or GradTape(m.params)
    b = latents.shape[0]
    cond = m.embed(prompts, latents.dtype)
    drop = cfg_drop_mask(b, m.drop_prob, generator)
    with tape:
        cond = m.drop_conditioning(cond, drop)
        sigma = torch.rand(b, generator=generator, dtype=latents.dtype)
        eps = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
        loss = v_loss(m.denoise, latents, eps, sigma, cond)
    backward(tape, loss)
    return loss.detach()


def cfg_denoise(m: TcldModel, x: Tensor, sigma: Tensor, cond: Context, scale: float) -> Tensor:
    """``v_uncond + scale * (v_cond - v_uncond)``; exact passthrough at scales 0 and 1."""
    if scale < 0:
        raise UsageError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1:
        return m.denoise(x, sigma, cond)
    v_uncond = m.denoise(x, sigma, m.null_context(x.shape[0], dtype=x.dtype))
    if scale == 0:
        return v_uncond
    v_cond = m.denoise(x, sigma, cond)
    return v_uncond + scale * (v_cond - v_uncond)


def generate_latent(
    m: TcldModel,
    cond: Context,
    noise: Tensor,
    steps: int,
    scale: Optional[float] = None,
    progress: bool = False,
) -> Tensor:
    scale = m.cfg_scale if scale is None else scale

    def guided(x: Tensor, sigma: Tensor, c: Context) -> Tensor:
        return cfg_denoise(m, x, sigma, c, scale)

    return sample(guided, noise, SamplerSchedule.linear(steps), cond, progress=progress)


def generation_noise(
    m: TcldModel, dmae: DmaeModel, batch: int, seed: int
) -> Tuple[Tensor, Tensor]:
    """Starting noise for both stages from generators seeded ``seed`` and ``seed + 1``."""
    eps_g = torch.randn(
        (batch, m.latent_channels, m.latent_length), generator=torch.Generator().manual_seed(seed)
    )
    eps_d = torch.randn(
        (batch, dmae.channels, m.latent_length * dmae.latent_hop),
        generator=torch.Generator().manual_seed(seed + 1),
    )
    return eps_g, eps_d


def generate(
    m: TcldModel,
    dmae: DmaeModel,
    prompts: List[str],
    seed: int = 0,
    steps_gen: int = 100,
    steps_dec: int = 100,
    scale: Optional[float] = None,
    clamp: bool = True,
    progress: bool = False,
) -> Tensor:
    """Text -> latent -> waveform batch [b, c, t]."""
    if m.latent_channels != dmae.latent_channels:
        raise LatentMismatchError(
            f"generator produces {m.latent_channels}-channel latents, "
            f"decoder expects {dmae.latent_channels}"
        )
    eps_g, eps_d = generation_noise(m, dmae, len(prompts), seed)
    z = generate_latent(m, m.embed(prompts), eps_g, steps_gen, scale, progress)
    if clamp:
        z = z.clamp(-1.0, 1.0)
    return decode(dmae, z, eps_d, steps_dec, progress)
