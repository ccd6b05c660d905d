"""Shared network building blocks with generator-driven initialization.

All randomness (parameter init, dropout masks) flows through explicit
torch.Generator objects so trained models are bit-reproducible from a seed
on a single thread.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize all parameters of `module` deterministically.

    Mirrors the torch defaults (uniform +-1/sqrt(fan_in) for conv/linear,
    +-1/sqrt(hidden) for LSTM) but draws from the supplied generator.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight.shape[1] * math.prod(m.weight.shape[2:])
            bound = fan_in**-0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.LSTM):
            bound = m.hidden_size**-0.5
            with torch.no_grad():
                for p in m.parameters():
                    p.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            m.reset_parameters()
            m.reset_running_stats()


def generator_dropout(x: torch.Tensor, p: float, training: bool,
                      generator: torch.Generator | None) -> torch.Tensor:
    """Dropout whose mask comes from an explicit generator; identity in eval."""
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class ConvBlock1d(nn.Module):
    """Conv1d + BatchNorm + ReLU over (batch, channels, time)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5,
                 causal: bool = False, padding_mode: str = "zeros"):
        super().__init__()
        self.causal = causal
        self.kernel_size = kernel_size
        pad = 0 if causal else kernel_size // 2
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, padding=pad,
                              padding_mode=padding_mode)
        self.norm = nn.BatchNorm1d(out_channels)

    def forward(self, x):
        if self.causal:
            x = F.pad(x, (self.kernel_size - 1, 0))
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock1d(nn.Module):
    """Single conv block plus identity skip; temporal radius = kernel//2."""

    def __init__(self, channels: int, kernel_size: int = 5, causal: bool = False,
                 padding_mode: str = "zeros"):
        super().__init__()
        self.block = ConvBlock1d(channels, channels, kernel_size, causal=causal,
                                 padding_mode=padding_mode)

    def forward(self, x):
        return x + self.block(x)


class ConvBlock2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.norm = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock2d(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.block = ConvBlock2d(channels, channels, kernel_size)

    def forward(self, x):
        return x + self.block(x)


def clone_state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def state_fingerprint(module: nn.Module) -> str:
    """Stable content hash of all parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for key in sorted(module.state_dict()):
        tensor = module.state_dict()[key]
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
