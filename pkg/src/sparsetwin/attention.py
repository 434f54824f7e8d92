"""Scaled dot-product cross-attention with optional logit bias and masking.

A single implementation backs the set encoder, the hierarchical propagator,
and the dense causal baseline.  Logit sizes are reported to any active
operation counters so counted-cost claims can be audited against real
forward passes.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .opcount import record_scores


class CrossAttention(nn.Module):
    """Q from one token set, K/V from another; softmax over keys.

    ``logit_bias`` is added to the attention logits (broadcast over queries
    when given per-key), ``mask`` is a boolean [n_q, n_k] tensor where False
    blocks attention.
    """

    def __init__(self, dim: int, n_heads: int = 1):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor | None = None,
        logit_bias: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if keys.shape[-2] == 0:
            raise ValueError("attention requires at least one key")
        if values is None:
            values = keys
        q = self._split_heads(self.q_proj(query))
        k = self._split_heads(self.k_proj(keys))
        v = self._split_heads(self.v_proj(values))
        logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        record_scores(logits.numel())
        if logit_bias is not None:
            logits = logits + logit_bias
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = torch.matmul(attn, v)
        return self.out_proj(self._merge_heads(out))

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        # [..., n, D] -> [..., heads, n, head_dim]
        shape = x.shape[:-1] + (self.n_heads, self.head_dim)
        return x.reshape(shape).transpose(-2, -3)

    def _merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-2, -3)
        return x.reshape(x.shape[:-2] + (self.dim,))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None, zero_init_out: bool = False):
        super().__init__()
        hidden = hidden or 2 * dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if zero_init_out:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
