"""
v-objective diffusion and the deterministic DDIM sampler.

The noise level ``sigma`` in [0, 1] maps to the angle ``phi = (pi / 2) * sigma``
with mixing weights ``alpha = cos(phi)`` and ``beta = sin(phi)``:

    x_sigma = alpha * x0 + beta * eps
    v       = alpha * eps - beta * x0

A denoiser predicts ``v``; from it the sampler recovers both the clean signal
and the noise and re-mixes them at the next, lower noise level.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor
from tqdm import tqdm

from .errors import DivergenceError, NoiseLevelError, ShapeError

logger = logging.getLogger(__name__)

Sigma = Union[float, Tensor]

# f(x_noisy, sigma[batch], conditioning) -> v_hat shaped like x_noisy
DenoiseFn = Callable[[Tensor, Tensor, Any], Tensor]


@dataclass(frozen=True)
class DiffusionCoeffs:
    sigma: Sigma
    phi: Sigma
    alpha: Sigma
    beta: Sigma


def coeffs(sigma: Sigma) -> DiffusionCoeffs:
    """Trigonometric mixing weights for a noise level (float or tensor)."""
    if isinstance(sigma, Tensor):
        if torch.any((sigma < 0) | (sigma > 1)) or not torch.all(torch.isfinite(sigma)):
            raise NoiseLevelError("noise levels must lie in [0, 1]")
        phi = (math.pi / 2) * sigma
        # endpoints are exact: cos(pi/2) would otherwise leave ~6e-17 of signal
        alpha = torch.where(sigma == 1, torch.zeros_like(phi), torch.cos(phi))
        beta = torch.where(sigma == 1, torch.ones_like(phi), torch.sin(phi))
        return DiffusionCoeffs(sigma, phi, alpha, beta)

    sigma = float(sigma)
    if not 0.0 <= sigma <= 1.0:
        raise NoiseLevelError(f"noise level {sigma} outside [0, 1]")
    phi = (math.pi / 2) * sigma
    alpha = 0.0 if sigma == 1.0 else math.cos(phi)
    beta = math.sin(phi)
    return DiffusionCoeffs(sigma, phi, alpha, beta)


def _broadcast(value: Sigma, like: Tensor) -> Sigma:
    """Reshape a per-batch coefficient vector to broadcast over [batch, ...]."""
    if isinstance(value, Tensor) and value.ndim == 1 and like.ndim > 1:
        return value.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return value


def _check_same_shape(x0: Tensor, eps: Tensor) -> None:
    if x0.shape != eps.shape:
        raise ShapeError(f"signal {tuple(x0.shape)} and noise {tuple(eps.shape)} differ")


def add_noise(x0: Tensor, eps: Tensor, sigma: Sigma) -> Tensor:
    _check_same_shape(x0, eps)
    c = coeffs(sigma)
    return _broadcast(c.alpha, x0) * x0 + _broadcast(c.beta, x0) * eps


def v_target(x0: Tensor, eps: Tensor, sigma: Sigma) -> Tensor:
    _check_same_shape(x0, eps)
    c = coeffs(sigma)
    return _broadcast(c.alpha, x0) * eps - _broadcast(c.beta, x0) * x0


def _sigma_vector(sigma: Sigma, batch: int, like: Tensor) -> Tensor:
    if isinstance(sigma, Tensor):
        return sigma.to(like.dtype).reshape(-1).expand(batch) if sigma.numel() == 1 else sigma.to(like.dtype)
    return torch.full((batch,), float(sigma), dtype=like.dtype, device=like.device)


def v_loss(model: DenoiseFn, x0: Tensor, eps: Tensor, sigma: Sigma, cond: Any = None) -> Tensor:
    """Mean squared error between the model's v prediction and the true v."""
    sigmas = _sigma_vector(sigma, x0.shape[0], x0)
    x_noisy = add_noise(x0, eps, sigmas)
    prediction = model(x_noisy, sigmas, cond)
    if prediction.shape != x0.shape:
        raise ShapeError(f"denoiser returned {tuple(prediction.shape)}, expected {tuple(x0.shape)}")
    loss = F.mse_loss(prediction, v_target(x0, eps, sigmas))
    if not torch.isfinite(loss):
        raise DivergenceError(f"v-objective loss is {loss.item()}")
    return loss


def ddim_step(
    model: DenoiseFn, x_t: Tensor, sigma_t: float, sigma_prev: float, cond: Any = None
) -> Tensor:
    """One deterministic step from ``sigma_t`` down to ``sigma_prev``."""
    if not 0.0 <= sigma_prev <= sigma_t <= 1.0:
        raise NoiseLevelError(
            f"DDIM step needs 0 <= sigma_prev <= sigma_t <= 1, got {sigma_t} -> {sigma_prev}"
        )
    if sigma_prev == sigma_t:
        return x_t

    now, nxt = coeffs(sigma_t), coeffs(sigma_prev)
    v_hat = model(x_t, _sigma_vector(sigma_t, x_t.shape[0], x_t), cond)
    x0_hat = now.alpha * x_t - now.beta * v_hat
    eps_hat = now.beta * x_t + now.alpha * v_hat
    return nxt.alpha * x0_hat + nxt.beta * eps_hat


@dataclass(frozen=True)
class SamplerSchedule:
    """Strictly decreasing noise levels from exactly 1 down to exactly 0."""

    sigmas: Tuple[float, ...]

    def __post_init__(self) -> None:
        sigmas = self.sigmas
        if len(sigmas) < 2:
            raise NoiseLevelError("a schedule needs at least one step")
        if sigmas[0] != 1.0 or sigmas[-1] != 0.0:
            raise NoiseLevelError(f"schedule must run from 1 to 0, got {sigmas[0]} .. {sigmas[-1]}")
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise NoiseLevelError("schedule must be strictly decreasing")

    @classmethod
    def linear(cls, steps: int) -> "SamplerSchedule":
        """Evenly spaced ``sigma_i = i / T`` for ``i = T .. 0``."""
        if steps < 1:
            raise NoiseLevelError(f"step count must be positive, got {steps}")
        return cls(tuple(i / steps for i in range(steps, -1, -1)))

    @classmethod
    def from_sequence(cls, sigmas: Sequence[float]) -> "SamplerSchedule":
        return cls(tuple(float(s) for s in sigmas))

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


@torch.no_grad()
def sample(
    model: DenoiseFn,
    noise: Tensor,
    schedule: SamplerSchedule,
    cond: Any = None,
    progress: bool = False,
) -> Tensor:
    """Fold :func:`ddim_step` over the schedule, starting from pure noise."""
    x = noise
    pairs = list(zip(schedule.sigmas, schedule.sigmas[1:]))
    for sigma_t, sigma_prev in tqdm(pairs, desc="DDIM", disable=not progress, leave=False):
        x = ddim_step(model, x, sigma_t, sigma_prev, cond)
    return x
