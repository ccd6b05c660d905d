"""Multi-head discrete codebook with Gumbel-softmax sampling.

A frame code is a tuple of H sub-selections, one per head, from H small
codebooks of K entries each, giving an effective vocabulary of K**H while
the per-frame payload stays at H indices. Training uses the relaxed
(soft) selection with a straight-through hard forward; inference selects
codes by plain argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class GumbelConfig:
    """Sampling knobs: relaxation temperature, hard forward, noise seed."""

    temperature: float = 1.0
    hard: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class Codebook(nn.Module):
    """Learnable code vectors, shape (heads, entries_per_head, code_dim)."""

    def __init__(self, heads: int = 4, entries_per_head: int = 256, code_dim: int = 64,
                 generator: torch.Generator | None = None):
        super().__init__()
        if min(heads, entries_per_head, code_dim) < 1:
            raise ValueError("codebook dimensions must be positive")
        self.heads = heads
        self.entries_per_head = entries_per_head
        self.code_dim = code_dim
        vectors = torch.empty(heads, entries_per_head, code_dim)
        bound = code_dim**-0.5
        vectors.uniform_(-bound, bound, generator=generator)
        self.vectors = nn.Parameter(vectors)

    @property
    def frame_dim(self) -> int:
        return self.heads * self.code_dim

    def vocabulary_size(self) -> int:
        """Number of distinct representable frame codes, K**H."""
        return self.entries_per_head**self.heads

    def extra_repr(self) -> str:
        return f"heads={self.heads}, entries_per_head={self.entries_per_head}, code_dim={self.code_dim}"


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def gumbel_sample(logits: torch.Tensor, cfg: GumbelConfig,
                  rng: torch.Generator | None = None):
    """Sample relaxed one-hot selections over the last axis.

    Returns (soft, indices) where soft rows sum to 1 and indices is the
    per-row argmax of soft. With `rng=None` no Gumbel noise is injected and
    the result is the deterministic temperature-scaled softmax, whose argmax
    equals argmax(logits).
    """
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    scores = logits
    if rng is not None:
        u = torch.rand(logits.shape, generator=rng, dtype=logits.dtype)
        neg_log_u = (-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20)
        scores = logits - torch.log(neg_log_u)
    soft = torch.softmax(scores / cfg.temperature, dim=-1)
    indices = soft.argmax(dim=-1)
    return soft, indices


def lookup(codebook: Codebook, indices: torch.Tensor) -> torch.Tensor:
    """Gather code vectors for index tensor (..., H) -> (..., H * code_dim)."""
    if indices.shape[-1] != codebook.heads:
        raise ValueError(f"expected {codebook.heads} heads, got {indices.shape[-1]}")
    if indices.numel() and (indices.min() < 0 or indices.max() >= codebook.entries_per_head):
        raise ValueError("code index out of range")
    gathered = [codebook.vectors[h][indices[..., h]] for h in range(codebook.heads)]
    return torch.cat(gathered, dim=-1)


def soft_lookup(soft: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Probability-weighted mixture of code vectors, (..., H, K) -> (..., H * code_dim)."""
    mixed = torch.einsum("...hk,hkn->...hn", soft, codebook.vectors)
    return mixed.reshape(*soft.shape[:-2], codebook.frame_dim)


class _StraightThrough(torch.autograd.Function):
    # forward value is exactly the hard lookup; gradients take the soft path
    @staticmethod
    def forward(ctx, soft_vec, hard_vec):
        return hard_vec

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(soft: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Hard codebook lookup in the forward pass, soft-lookup gradient in the backward."""
    soft_vec = soft_lookup(soft, codebook)
    hard_vec = lookup(codebook, soft.argmax(dim=-1)).detach()
    return _StraightThrough.apply(soft_vec, hard_vec)


@dataclass
class CodebookStats:
    """Usage histogram (heads, entries) and per-head perplexity in [1, K]."""

    histogram: torch.Tensor
    perplexity: torch.Tensor


def codebook_stats(indices: torch.Tensor, entries_per_head: int) -> CodebookStats:
    """Per-head usage histogram and perplexity of the empirical code distribution."""
    if indices.numel() == 0:
        raise ValueError("empty index batch")
    flat = indices.reshape(-1, indices.shape[-1]).long()
    heads = flat.shape[1]
    hist = torch.zeros(heads, entries_per_head, dtype=torch.long)
    for h in range(heads):
        hist[h] = torch.bincount(flat[:, h], minlength=entries_per_head)
    probs = hist.double() / flat.shape[0]
    entropy = -(probs * probs.clamp_min(1e-300).log()).sum(dim=1)
    return CodebookStats(histogram=hist, perplexity=entropy.exp())


def anneal_temperature(step: int, total_steps: int, start: float = 2.0,
                       end: float = 0.5, anneal_frac: float = 0.5) -> float:
    """Linear decay from `start` to `end` over the first `anneal_frac` of training."""
    horizon = max(1, int(total_steps * anneal_frac))
    if step >= horizon:
        return end
    frac = step / horizon
    return start + frac * (end - start)
