"""
Differentiable 1D building blocks and the gradient bookkeeping around them.

Tensors follow the [batch, channels, length] layout for convolutions and
[batch, tokens, features] for attention. Gradients come from torch autograd;
:class:`GradTape` scopes a backward pass to a named :class:`ParamStore` and
reports non-finite gradients by parameter name.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NonFiniteGradientError, ShapeError, TapeError

logger = logging.getLogger(__name__)


class ParamStore(Mapping[str, nn.Parameter]):
    """Ordered, uniquely named view over a module's trainable parameters."""

    def __init__(self, params: "OrderedDict[str, nn.Parameter]"):
        self._params = params

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(OrderedDict((n, p) for n, p in module.named_parameters() if p.requires_grad))

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.numel() for p in self._params.values())

    def clear_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        grads = [p.grad for p in self._params.values() if p.grad is not None]
        if not grads:
            return 0.0
        return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))

    def snapshot(self) -> Dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self._params.items()}

    def load(self, values: Mapping[str, Tensor]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        missing = set(self._params) - set(values)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in self._params.items():
                value = torch.as_tensor(values[name])
                if tuple(value.shape) != tuple(p.shape):
                    raise ShapeError(
                        f"parameter '{name}' has shape {tuple(value.shape)}, expected {tuple(p.shape)}"
                    )
                p.copy_(value.to(p.dtype))


class GradTape:
    """
    Records a forward pass for reverse-mode differentiation.

    Inside ``with tape:`` gradient recording is enabled. Inputs registered with
    :meth:`watch` receive gradients alongside the parameters.
    """

    def __init__(self, params: ParamStore):
        self.params = params
        self.inputs: Dict[str, Tensor] = {}
        self._grad_mode: Optional[torch.enable_grad] = None

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad_(True)
        self.inputs[name] = tensor
        return tensor

    def __enter__(self) -> "GradTape":
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        assert self._grad_mode is not None
        self._grad_mode.__exit__(*exc)
        self._grad_mode = None

    def clear(self) -> None:
        self.params.clear_grads()
        for t in self.inputs.values():
            t.grad = None


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every parameter's ``.grad``."""
    if loss.numel() != 1:
        raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise TapeError("loss was not recorded on the tape")
    loss.backward()
    for name, p in tape.params.items():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    for name, t in tape.inputs.items():
        if t.grad is not None and not torch.all(torch.isfinite(t.grad)):
            raise NonFiniteGradientError(name)


def group_count(channels: int, groups: int = 8) -> int:
    """Eight groups, or fewer so that the count divides ``channels``."""
    groups = min(groups, channels)
    while channels % groups:
        groups -= 1
    return groups


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(group_count(channels), channels)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; output length ``(len + 2 * padding - k) // stride + 1``."""
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if x.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {tuple(x.shape)} does not match kernel {tuple(weight.shape)}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


class Conv1d(nn.Conv1d):
    """``nn.Conv1d`` routed through :func:`conv1d` for shape validation."""

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride[0], self.padding[0])


def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class Downsample(nn.Module):
    """Learnable strided convolution; factor 1 only projects channels (if needed)."""

    def __init__(self, in_channels: int, out_channels: int, factor: int):
        super().__init__()
        if factor < 1:
            raise ShapeError(f"resampling factor must be >= 1, got {factor}")
        self.factor = factor
        if factor == 1:
            self.conv = Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None
        else:
            self.conv = Conv1d(in_channels, out_channels, 2 * factor + 1, stride=factor, padding=factor)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.factor:
            raise ShapeError(f"length {x.shape[-1]} not divisible by factor {self.factor}")
        return x if self.conv is None else self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour repeat followed by a learnable convolution."""

    def __init__(self, in_channels: int, out_channels: int, factor: int):
        super().__init__()
        if factor < 1:
            raise ShapeError(f"resampling factor must be >= 1, got {factor}")
        self.factor = factor
        if factor == 1:
            self.conv = Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None
        else:
            self.conv = Conv1d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        if self.factor > 1:
            x = x.repeat_interleave(self.factor, dim=-1)
        return x if self.conv is None else self.conv(x)


def attention_weights(q: Tensor, k: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """
    Softmax(q k^T / sqrt(d)) for q [b, h, n, d], k [b, h, m, d].

    ``mask`` is boolean [b, m], True marking keys that may be attended.
    """
    logits = torch.einsum("bhnd,bhmd->bhnm", q, k) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
    return logits.softmax(dim=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, inner = x.shape
    return x.view(b, n, heads, inner // heads).transpose(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


class SelfAttention(nn.Module):
    """Multi-head attention over time, without positional encoding."""

    def __init__(self, features: int, heads: int, head_features: int):
        super().__init__()
        inner = heads * head_features
        self.heads = heads
        self.features = features
        self.to_q = nn.Linear(features, inner, bias=False)
        self.to_k = nn.Linear(features, inner, bias=False)
        self.to_v = nn.Linear(features, inner, bias=False)
        self.to_out = nn.Linear(inner, features, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.features:
            raise ShapeError(f"expected [batch, tokens, {self.features}], got {tuple(x.shape)}")
        q, k, v = (_split_heads(f(x), self.heads) for f in (self.to_q, self.to_k, self.to_v))
        out = attention_weights(q, k) @ v
        return self.to_out(_merge_heads(out))


class CrossAttention(nn.Module):
    """
    Multi-head attention from ``x`` onto an external context sequence.

    Rows whose context is entirely masked attend to a learned null key/value
    pair instead, so their output never depends on the masked values.
    """

    def __init__(self, features: int, context_features: int, heads: int, head_features: int):
        super().__init__()
        inner = heads * head_features
        self.heads = heads
        self.features = features
        self.context_features = context_features
        self.to_q = nn.Linear(features, inner, bias=False)
        self.to_k = nn.Linear(context_features, inner, bias=False)
        self.to_v = nn.Linear(context_features, inner, bias=False)
        self.null_kv = nn.Parameter(torch.randn(2, inner) * 0.02)
        self.to_out = nn.Linear(inner, features, bias=False)

    def forward(self, x: Tensor, context: Tensor, context_mask: Optional[Tensor] = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.features:
            raise ShapeError(f"expected [batch, tokens, {self.features}], got {tuple(x.shape)}")
        if context.ndim != 3 or context.shape[-1] != self.context_features:
            raise ShapeError(
                f"context must be [batch, tokens, {self.context_features}], got {tuple(context.shape)}"
            )
        b, m = context.shape[0], context.shape[1]
        if context_mask is None:
            context_mask = torch.ones(b, m, dtype=torch.bool, device=context.device)
        if context_mask.shape != (b, m):
            raise ShapeError(f"mask {tuple(context_mask.shape)} does not match context length {m}")

        null_k, null_v = (t.expand(b, 1, -1) for t in self.null_kv.to(x.dtype)[:, None, :])
        k = torch.cat([null_k, self.to_k(context)], dim=1)
        v = torch.cat([null_v, self.to_v(context)], dim=1)
        mask = torch.cat([~context_mask.any(dim=1, keepdim=True), context_mask], dim=1)

        q = _split_heads(self.to_q(x), self.heads)
        k, v = _split_heads(k, self.heads), _split_heads(v, self.heads)
        out = attention_weights(q, k, mask) @ v
        return self.to_out(_merge_heads(out))


class Modulation(nn.Module):
    """Per-channel affine ``x * (1 + scale(f)) + shift(f)``; identity at init."""

    def __init__(self, channels: int, features: int):
        super().__init__()
        self.to_scale_shift = zero_init(nn.Linear(features, 2 * channels))

    def forward(self, x: Tensor, features: Tensor) -> Tensor:
        if features.shape[0] != x.shape[0]:
            raise ShapeError(f"feature batch {features.shape[0]} does not match input batch {x.shape[0]}")
        scale, shift = self.to_scale_shift(features).unsqueeze(-1).chunk(2, dim=1)
        return x * (1 + scale) + shift


def sinusoidal_features(sigma: Tensor, dim: int = 64, max_period: float = 10000.0) -> Tensor:
    """Log-spaced sinusoidal featurization of noise levels ``sigma`` [batch]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=sigma.dtype) / half)
    args = (1000.0 * sigma)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class NoiseFeatures(nn.Module):
    """Noise level -> feature vector consumed by every modulation unit."""

    def __init__(self, features: int, sinusoidal_dim: int = 64):
        super().__init__()
        self.sinusoidal_dim = sinusoidal_dim
        self.mlp = nn.Sequential(
            nn.Linear(sinusoidal_dim, features),
            nn.SiLU(),
            nn.Linear(features, features),
        )

    def forward(self, sigma: Tensor) -> Tensor:
        return self.mlp(sinusoidal_features(sigma, self.sinusoidal_dim))
