"""Comparison models: uniform-kNN / global-only ablations, POD-GPR, and a
dense causal-transformer latent propagator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import cho_factor, cho_solve
from torch import nn

from .attention import CrossAttention, FeedForward
from .model import FieldModel, LatentState
from .reconstructor import ReconstructionOutput

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ablation entry points (exact reductions of the shared pipeline)
# ---------------------------------------------------------------------------


def uniform_knn_reconstruct(
    model: FieldModel,
    sensor_x: torch.Tensor,
    sensor_u: torch.Tensor,
    query_x: torch.Tensor,
) -> ReconstructionOutput:
    """Reconstruction with importance frozen to 1.

    With constant phi the warped metric preserves Euclidean ordering, so
    selection is plain kNN and the aggregation is unscaled.  Identical to the
    adaptive path by construction when phi is constant.
    """
    z_global, z_local = model.encoder(sensor_x, sensor_u)
    phi = torch.ones(sensor_x.shape[:-1], dtype=sensor_x.dtype)
    state = LatentState(z_global=z_global, z_local=z_local, phi=phi)
    return model.reconstructor(state.z_global, state.z_local, sensor_x, phi, query_x)


def global_only_reconstruct(
    model: FieldModel,
    sensor_x: torch.Tensor,
    sensor_u: torch.Tensor,
    query_x: torch.Tensor,
) -> ReconstructionOutput:
    """Decode from the global token and query embedding only (no local tokens)."""
    z_global, z_local = model.encoder(sensor_x, sensor_u)
    phi = torch.ones(sensor_x.shape[:-1], dtype=sensor_x.dtype)
    return model.reconstructor(z_global, z_local, sensor_x, phi, query_x, use_local=False)


# ---------------------------------------------------------------------------
# POD + Gaussian-process regression
# ---------------------------------------------------------------------------


@dataclass
class PodBasis:
    """Orthonormal modes of mean-centered training snapshots."""

    modes: np.ndarray  # [n_features, r]
    singular_values: np.ndarray  # [r], nonincreasing
    mean: np.ndarray  # [n_features]


def pod_fit(snapshots: np.ndarray, rank: int) -> PodBasis:
    """SVD of the centered snapshot matrix [n_snapshots, n_features]."""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if rank < 1 or rank > min(snapshots.shape):
        raise ValueError(f"rank must be in [1, {min(snapshots.shape)}], got {rank}")
    mean = snapshots.mean(axis=0)
    centered = snapshots - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    return PodBasis(modes=vt[:rank].T.copy(), singular_values=s[:rank].copy(), mean=mean)


def pod_project(basis: PodBasis, snapshots: np.ndarray) -> np.ndarray:
    return (np.asarray(snapshots, dtype=np.float64) - basis.mean) @ basis.modes


def pod_reconstruct(basis: PodBasis, coeffs: np.ndarray) -> np.ndarray:
    return basis.mean + np.asarray(coeffs) @ basis.modes.T


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


@dataclass
class PodGpr:
    """GPR from sensor readings to modal coefficients, one output per mode.

    Isotropic squared-exponential kernel; length scale from the median
    pairwise-distance heuristic on the training inputs.
    """

    basis: PodBasis
    x_train: np.ndarray  # [n_train, n_inputs]
    weights: np.ndarray  # [n_train, r]
    length_scale: float
    noise: float

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.exp(-_sq_dists(a, b) / (2.0 * self.length_scale**2))

    def predict_coeffs(self, sensor_values: np.ndarray) -> np.ndarray:
        sensor_values = np.atleast_2d(np.asarray(sensor_values, dtype=np.float64))
        return self.kernel(sensor_values, self.x_train) @ self.weights

    def reconstruct(self, sensor_values: np.ndarray) -> np.ndarray:
        fields = pod_reconstruct(self.basis, self.predict_coeffs(sensor_values))
        return fields[0] if np.asarray(sensor_values).ndim == 1 else fields


def pod_gpr_fit(
    basis: PodBasis,
    snapshots: np.ndarray,
    sensor_rows: np.ndarray,
    noise: float = 1e-6,
    length_scale: float | None = None,
) -> PodGpr:
    """Fit the sensor-readings -> modal-coefficients regressor.

    ``sensor_rows`` index the flattened feature axis (points x channels).  A
    singular kernel matrix gets escalating diagonal jitter, logged.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    x_train = snapshots[:, sensor_rows]
    coeffs = pod_project(basis, snapshots)
    if length_scale is None:
        d2 = _sq_dists(x_train, x_train)
        off_diag = d2[np.triu_indices_from(d2, k=1)]
        length_scale = float(np.sqrt(np.median(off_diag))) if off_diag.size else 1.0
        length_scale = max(length_scale, 1e-8)
    k = np.exp(-_sq_dists(x_train, x_train) / (2.0 * length_scale**2))
    jitter = 0.0
    for attempt in range(6):
        try:
            factor = cho_factor(k + (noise + jitter) * np.eye(len(k)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 10.0 ** (attempt - 10)
            logger.warning("kernel matrix singular; adding jitter %.1e", jitter)
    else:
        raise np.linalg.LinAlgError("kernel matrix not positive definite even with jitter")
    weights = cho_solve(factor, coeffs)
    return PodGpr(
        basis=basis,
        x_train=x_train,
        weights=weights,
        length_scale=length_scale,
        noise=noise + jitter,
    )


def sensor_rows(indices: np.ndarray, n_channels: int) -> np.ndarray:
    """Flattened feature rows covering all channels of the given point indices."""
    indices = np.asarray(indices, dtype=np.int64)
    return (indices[:, None] * n_channels + np.arange(n_channels)[None, :]).ravel()


# ---------------------------------------------------------------------------
# causal transformer propagator
# ---------------------------------------------------------------------------


@dataclass
class CausalConfig:
    latent_dim: int = 64
    window: int = 16
    n_heads: int = 1
    ff_hidden: int = 448
    dt: float = 1.0

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")


class CausalPropagator(nn.Module):
    """Dense baseline: all frame tokens (leader + followers) are flattened
    into one sequence and attend under a frame-level causal mask; the last
    frame's outputs map to the next latent state."""

    def __init__(self, cfg: CausalConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.latent_dim
        self.frame_emb = nn.Parameter(torch.randn(cfg.window, d) * 0.02)
        self.norm_in = nn.LayerNorm(d)
        self.attn = CrossAttention(d, cfg.n_heads)
        self.norm_mid = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_hidden)
        self.head = nn.Linear(d, d)

    def forward(self, g_hist: torch.Tensor, z_hist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """g_hist [.., T, D], z_hist [.., T, N, D] -> next (g, z)."""
        t = g_hist.shape[-2]
        if t > self.cfg.window:
            g_hist = g_hist[..., -self.cfg.window :, :]
            z_hist = z_hist[..., -self.cfg.window :, :, :]
            t = self.cfg.window
        n = z_hist.shape[-2]
        tokens = torch.cat([g_hist.unsqueeze(-2), z_hist], dim=-2)  # [.., T, N+1, D]
        tokens = tokens + self.frame_emb[-t:].unsqueeze(-2)
        flat = tokens.reshape(tokens.shape[:-3] + (t * (n + 1), tokens.shape[-1]))
        frame_of = torch.arange(t).repeat_interleave(n + 1)
        mask = frame_of[:, None] >= frame_of[None, :]
        x = self.norm_in(flat)
        x = self.attn(x, x, mask=mask) + flat
        x = self.ff(self.norm_mid(x)) + x
        last = x[..., -(n + 1) :, :]
        nxt = self.head(last)
        return nxt[..., 0, :], nxt[..., 1:, :]

    def predict_next(
        self, g_hist: torch.Tensor, z_hist: torch.Tensor, phi: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self(g_hist, z_hist)


def matched_causal_config(lfd_module: nn.Module, window: int, latent_dim: int, dt: float = 1.0) -> CausalConfig:
    """Pick the causal baseline's feed-forward width so its parameter count
    lands within 20% of the hierarchical propagator's."""
    target = sum(p.numel() for p in lfd_module.parameters())
    base = CausalConfig(latent_dim=latent_dim, window=window, ff_hidden=1, dt=dt)
    fixed = sum(p.numel() for p in CausalPropagator(base).parameters())
    per_hidden = 2 * latent_dim + 2  # weights + biases per hidden unit
    hidden = max(8, int(round((target - fixed) / per_hidden)))
    return CausalConfig(latent_dim=latent_dim, window=window, ff_hidden=hidden, dt=dt)
