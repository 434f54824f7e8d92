"""Hierarchical latent propagator with explicit Euler integration.

The global token drives the dynamics: it self-attends over its own history
and cross-attends to the (temporally pooled) sensor tokens with an additive
``ln phi`` logit bias, so low-importance sensors contribute negligibly.
Sensor tokens are followers: each attends only to the leader history, never
to other followers.  The derivative is applied as an additive Euler update to
the whole latent state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import CrossAttention, FeedForward


@dataclass
class LfdConfig:
    latent_dim: int = 64
    window: int = 16
    dt: float = 1.0
    n_heads: int = 1
    ff_hidden: int | None = None  # defaults to 2 * latent_dim
    bias_floor: float = -30.0
    pool: str = "mean"

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.pool not in ("mean", "max"):
            raise ValueError(f"pool must be 'mean' or 'max', got {self.pool!r}")


def pool_history(states: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Compress a history window along its leading time axis."""
    if states.shape[0] == 0:
        raise ValueError("cannot pool an empty window")
    if mode == "mean":
        return states.mean(dim=0)
    if mode == "max":
        return states.max(dim=0).values
    raise ValueError(f"unknown pool mode {mode!r}")


def euler_step(state: torch.Tensor, derivative: torch.Tensor, dt: float) -> torch.Tensor:
    """S_{t+1} = S_t + dt * F; exactly additive."""
    return state + dt * derivative


class LeaderFollowerDynamics(nn.Module):
    def __init__(self, cfg: LfdConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.latent_dim
        h = cfg.ff_hidden or 2 * d
        self.time_emb = nn.Parameter(torch.randn(cfg.window, d) * 0.02)
        self.norm_g = nn.LayerNorm(d)
        self.norm_z = nn.LayerNorm(d)
        self.leader_self = CrossAttention(d, cfg.n_heads)
        self.leader_cross = CrossAttention(d, cfg.n_heads)
        self.follower_cross = CrossAttention(d, cfg.n_heads)
        # zero-init output layers: the propagator starts as the identity map
        self.ff_leader = FeedForward(d, h, zero_init_out=True)
        self.ff_follower = FeedForward(d, h, zero_init_out=True)

    def derivative(
        self,
        g_hist: torch.Tensor,
        z_hist: torch.Tensor,
        phi: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Temporal derivative from a history window.

        g_hist [T, D] or [B, T, D]: leader history (T <= window).
        z_hist [T, N, D] or [B, T, N, D]: follower history, pooled over T
        before use.  phi [N] gates the leader's cross-attention.
        Returns (dg [.., D], dz [.., N, D]).
        """
        t = g_hist.shape[-2]
        if t < 1 or t > self.cfg.window:
            raise ValueError(f"history length {t} outside [1, {self.cfg.window}]")
        time_axis = 0 if g_hist.dim() == 2 else 1
        z_pool = self.norm_z(pool_history(z_hist.movedim(time_axis, 0), self.cfg.pool))
        g_in = self.norm_g(g_hist) + self.time_emb[-t:]
        bias = torch.clamp(torch.log(phi), min=self.cfg.bias_floor)
        self_out = self.leader_self(g_in, g_in)[..., -1, :]
        cross_out = self.leader_cross(g_in, z_pool, logit_bias=bias)[..., -1, :]
        dg = self.ff_leader(self_out + cross_out)
        follower_out = self.follower_cross(z_pool, g_in)
        dz = self.ff_follower(follower_out)
        return dg, dz

    def predict_next(
        self, g_hist: torch.Tensor, z_hist: torch.Tensor, phi: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """One Euler step from the end of the history window."""
        dg, dz = self.derivative(g_hist, z_hist, phi)
        g_next = euler_step(g_hist[..., -1, :], dg, self.cfg.dt)
        z_next = euler_step(z_hist[..., -1, :, :], dz, self.cfg.dt)
        return g_next, z_next


@dataclass
class LatentTrajectory:
    """Rolled-out latent states plus stability diagnostics."""

    leaders: np.ndarray  # [T, D]
    followers: np.ndarray  # [T, N, D]
    phi: np.ndarray  # [N]
    dt: float
    norms: np.ndarray  # [T] RMS latent magnitude per step
    divergence_step: int | None = None

    @property
    def n_steps(self) -> int:
        return self.leaders.shape[0]


def _state_norm(g: torch.Tensor, z: torch.Tensor) -> float:
    total = g.square().sum() + z.square().sum()
    return float(torch.sqrt(total / (g.numel() + z.numel())))


@torch.no_grad()
def rollout(
    propagator,
    g_init: torch.Tensor,
    z_init: torch.Tensor,
    phi: torch.Tensor,
    horizon: int,
    window: int | None = None,
) -> LatentTrajectory:
    """Autoregressive rollout from an initial window of latent states.

    ``propagator`` needs a ``predict_next(g_hist, z_hist, phi)`` method; the
    sliding history is capped at ``window`` (defaults to the propagator's
    configured window).  A non-finite state truncates the trajectory and
    records the divergence step.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    window = window or getattr(propagator, "cfg").window
    g_list = [g_init[i] for i in range(g_init.shape[0])]
    z_list = [z_init[i] for i in range(z_init.shape[0])]
    norms = [_state_norm(g, z) for g, z in zip(g_list, z_list)]
    divergence_step = None
    for step in range(horizon):
        g_hist = torch.stack(g_list[-window:], dim=0)
        z_hist = torch.stack(z_list[-window:], dim=0)
        g_next, z_next = propagator.predict_next(g_hist, z_hist, phi)
        if not (torch.isfinite(g_next).all() and torch.isfinite(z_next).all()):
            divergence_step = len(g_list)
            break
        g_list.append(g_next)
        z_list.append(z_next)
        norms.append(_state_norm(g_next, z_next))
    return LatentTrajectory(
        leaders=torch.stack(g_list).cpu().numpy(),
        followers=torch.stack(z_list).cpu().numpy(),
        phi=phi.detach().cpu().numpy(),
        dt=float(getattr(propagator.cfg, "dt", 1.0)),
        norms=np.asarray(norms),
        divergence_step=divergence_step,
    )
