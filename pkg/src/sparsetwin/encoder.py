"""Set encoder: Fourier-feature embedding plus bidirectional cross-attention.

Sensor tokens are built from layer-normalized positional and value
embeddings.  A small bank of learnable latent queries first aggregates the
sensor set into a compact summary (cost N*S), and the refined summary is then
broadcast back into the sensor tokens with a residual connection, so every
token carries both its local measurement and global context.  The last latent
row serves as the global summary token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import CrossAttention


@dataclass
class EncoderConfig:
    n_dim: int = 2
    n_channels: int = 2
    latent_dim: int = 64
    n_latents: int = 16
    n_freq: int = 32
    n_heads: int = 1
    freq_std: float = 1.0
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if min(self.n_dim, self.n_channels, self.latent_dim, self.n_latents, self.n_freq) < 1:
            raise ValueError("all encoder sizes must be >= 1")


class FourierFeatures(nn.Module):
    """x -> W_p . [cos(2 pi B x), sin(2 pi B x)] with learnable frequencies B."""

    def __init__(self, n_dim: int, n_freq: int, out_dim: int, freq_std: float = 1.0):
        super().__init__()
        self.freqs = nn.Parameter(torch.randn(n_freq, n_dim) * freq_std)
        self.proj = nn.Linear(2 * n_freq, out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ang = 2.0 * math.pi * torch.matmul(x, self.freqs.transpose(0, 1))
        return self.proj(torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1))


class SensorEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.latent_dim
        self.fourier = FourierFeatures(cfg.n_dim, cfg.n_freq, d, cfg.freq_std)
        self.value_proj = nn.Linear(cfg.n_channels, d, bias=False)
        self.norm_pos = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.norm_val = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.latents = nn.Parameter(torch.randn(cfg.n_latents, d) / math.sqrt(d))
        self.aggregate = CrossAttention(d, cfg.n_heads)
        self.enrich = CrossAttention(d, cfg.n_heads)

    def embed(self, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        """Per-token embedding h_i = LN(e_pos) + LN(e_val); shape [..., N, D]."""
        e_pos = self.norm_pos(self.fourier(x))
        e_val = self.norm_val(self.value_proj(u))
        return e_pos + e_val

    def forward(self, x: torch.Tensor, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode sensors at coords x [.., N, d] with values u [.., N, c].

        Returns (z_global [.., D], z_local [.., N, D]).  The sensor-token
        output is permutation-equivariant and the global token permutation-
        invariant, since attention treats the sensors as a set.
        """
        if x.shape[-2] == 0:
            raise ValueError("cannot encode an empty observation (N = 0)")
        tokens = self.embed(x, u)
        queries = self.latents.expand(tokens.shape[:-2] + self.latents.shape)
        refined = self.aggregate(queries, tokens)
        z_local = self.enrich(tokens, refined) + tokens
        z_global = refined[..., -1, :]
        return z_global, z_local
