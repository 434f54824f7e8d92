"""Continuous-field decoding via importance-warped neighbor selection.

For each query the k sensors with the smallest warped distance
``||y - x_i|| / (phi_i^gamma + eps)`` are selected (discrete, non-
differentiable), their tokens are softly aggregated with softmax weights over
the negative warped distances, scaled by the importance scores, and the
result is fused with the query's positional embedding and the global token
before two heads emit the predicted mean and log-variance per channel.

Selection runs in float64 numpy with a stable sort, so ties break by
ascending sensor index and results match an exhaustive-sort oracle exactly.
Decoding is chunked over queries: per-query outputs are O(K), and the sensor
count only enters through the bounded per-chunk workspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import FourierFeatures
from .opcount import record_live, record_scores

WARP_EPS = 1e-6


@dataclass
class ReconstructorConfig:
    gamma: float = 1.0
    eps: float = WARP_EPS
    top_k: int = 8
    bandwidth: float = 0.05
    fusion_hidden: int = 128
    logvar_clamp: float = 10.0
    query_chunk: int = 2048

    def validate(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def warped_distance(dist, phi, gamma: float = 1.0, eps: float = WARP_EPS):
    """Euclidean distance shrunk by importance: d / (phi^gamma + eps)."""
    return dist / (phi**gamma + eps)


def select_neighbors(
    query_x: np.ndarray,
    sensor_x: np.ndarray,
    phi: np.ndarray,
    top_k: int,
    gamma: float = 1.0,
    eps: float = WARP_EPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the top_k sensors by warped distance, per query.

    Returns (indices [n_q, k], warped distances [n_q, k]); if fewer sensors
    than top_k exist, all of them are returned.  Deterministic: ties break by
    ascending sensor index via a stable sort on float64 distances.
    """
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    sensor_x = np.asarray(sensor_x, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if sensor_x.shape[0] == 0:
        raise ValueError("empty sensor set")
    diff = query_x[:, None, :] - sensor_x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    warped = warped_distance(dist, phi[None, :], gamma, eps)
    k = min(top_k, sensor_x.shape[0])
    order = np.argsort(warped, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(warped, order, axis=1)


@dataclass
class ReconstructionOutput:
    mean: torch.Tensor  # [..., n_q, n_c]
    log_var: torch.Tensor  # [..., n_q, n_c]
    neighbors: torch.Tensor  # [n_q, k] sensor indices (empty when global-only)
    weights: torch.Tensor  # [n_q, k] softmax weights before phi scaling

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_var)


class Reconstructor(nn.Module):
    """Decoder from (global token, sensor tokens, importance) to field values."""

    def __init__(
        self,
        cfg: ReconstructorConfig,
        latent_dim: int,
        n_channels: int,
        fourier: FourierFeatures,
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_channels = n_channels
        self.fourier = fourier  # shared with the encoder
        d, h = latent_dim, cfg.fusion_hidden
        self.proj = nn.Linear(d, d)
        self.fusion_in = nn.Linear(2 * d, h)
        self.fusion_hidden = nn.Linear(h, h)
        self.act = nn.GELU()
        self.mean_head = nn.Linear(h, n_channels)
        self.logvar_head = nn.Linear(h, n_channels)

    def aggregate(
        self,
        w_dist: torch.Tensor,
        phi_sel: torch.Tensor,
        tokens_sel: torch.Tensor,
        sigma: torch.Tensor | float | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Soft aggregation over an already-selected neighbor set.

        w_dist [n_q, k] warped distances, phi_sel [n_q, k], tokens_sel
        [..., n_q, k, D].  Returns (features [..., n_q, D], weights [n_q, k]).
        Differentiable in everything given fixed selection.
        """
        sigma = self.cfg.bandwidth if sigma is None else sigma
        logits = -w_dist / sigma
        record_scores(logits.numel())
        weights = torch.softmax(logits, dim=-1)
        gated = weights * phi_sel
        feats = torch.einsum("qk,...qkd->...qd", gated, self.proj(tokens_sel))
        return feats, weights

    def decode_query(
        self,
        feats: torch.Tensor,
        query_x: torch.Tensor,
        z_global: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Fuse local features with the query embedding and global token."""
        pos = self.fourier(query_x)
        fused_in = torch.cat(
            [feats + pos, z_global.unsqueeze(-2).expand(feats.shape)], dim=-1
        )
        hidden = self.act(self.fusion_in(fused_in))
        hidden = self.act(self.fusion_hidden(hidden))
        mean = self.mean_head(hidden)
        log_var = self.logvar_head(hidden).clamp(-self.cfg.logvar_clamp, self.cfg.logvar_clamp)
        return mean, log_var

    def forward(
        self,
        z_global: torch.Tensor,
        z_local: torch.Tensor,
        sensor_x: torch.Tensor,
        phi: torch.Tensor,
        query_x: torch.Tensor,
        sigma: torch.Tensor | float | None = None,
        use_local: bool = True,
    ) -> ReconstructionOutput:
        """Batched decode at query_x [n_q, d].

        z_global [..., D], z_local [..., N, D], phi [N].  Sensor positions and
        importance are shared across any leading batch dims, so selection and
        weights are computed once.  With use_local=False the local branch is
        skipped entirely (global-only decoding).
        """
        n_q = query_x.shape[0]
        dtype = z_global.dtype
        batch_shape = z_global.shape[:-1]
        k = min(self.cfg.top_k, sensor_x.shape[0]) if use_local else 0
        neighbors = torch.empty((n_q, k), dtype=torch.int64)
        weights = torch.empty((n_q, k), dtype=dtype)
        n_batch = int(np.prod(batch_shape)) if batch_shape else 1
        out_elems = 2 * n_batch * n_q * self.n_channels + neighbors.numel() + weights.numel()

        chunk = max(1, self.cfg.query_chunk)
        outputs_mean = []
        outputs_logvar = []
        for start in range(0, n_q, chunk):
            stop = min(start + chunk, n_q)
            q_chunk = query_x[start:stop]
            if use_local:
                m, lv, idx, w, ws_elems = self._decode_chunk(
                    z_global, z_local, sensor_x, phi, q_chunk, sigma, k
                )
                neighbors[start:stop] = idx
                weights[start:stop] = w.detach().to(dtype)
            else:
                feats = torch.zeros(
                    batch_shape + (q_chunk.shape[0], z_global.shape[-1]), dtype=dtype
                )
                m, lv = self.decode_query(feats, q_chunk, z_global)
                ws_elems = feats.numel()
            record_live(out_elems + ws_elems)
            outputs_mean.append(m)
            outputs_logvar.append(lv)
        mean = torch.cat(outputs_mean, dim=-2)
        log_var = torch.cat(outputs_logvar, dim=-2)
        return ReconstructionOutput(mean=mean, log_var=log_var, neighbors=neighbors, weights=weights)

    def _decode_chunk(self, z_global, z_local, sensor_x, phi, q_chunk, sigma, k):
        cfg = self.cfg
        c, n = q_chunk.shape[0], sensor_x.shape[0]
        idx_np, _ = select_neighbors(
            q_chunk.detach().cpu().numpy(),
            sensor_x.detach().cpu().numpy(),
            phi.detach().cpu().numpy(),
            k,
            gamma=cfg.gamma,
            eps=cfg.eps,
        )
        idx = torch.from_numpy(np.ascontiguousarray(idx_np))

        # recompute warped distances for the selected set in torch for gradients
        x_sel = sensor_x[idx]  # [c, k, d]
        dist = torch.linalg.vector_norm(q_chunk.unsqueeze(1) - x_sel, dim=-1)
        phi_sel = phi[idx]
        w_dist = warped_distance(dist, phi_sel, cfg.gamma, cfg.eps)
        if isinstance(sigma, torch.Tensor) and sigma.ndim > 0:
            sigma = sigma[idx]
        tokens_sel = z_local.index_select(-2, idx.reshape(-1)).reshape(
            z_local.shape[:-2] + idx.shape + z_local.shape[-1:]
        )
        feats, w = self.aggregate(w_dist, phi_sel, tokens_sel, sigma)
        mean, log_var = self.decode_query(feats, q_chunk, z_global)

        # live workspace accounting, audited against bench.count_decode_cost:
        # distances [c,N]+warped [c,N], sort values+indices [c,N]+[c,N],
        # selected idx/dist/phi/weights 4*[c,k], gathered+projected tokens
        # 2*[c,k,D], features+positional 2*[c,D], fused input [c,2D],
        # two hidden activations 2*[c,h], head outputs 2*[c,n_c]
        d, h = z_local.shape[-1], cfg.fusion_hidden
        ws = c * (4 * n + 4 * k + 2 * k * d + 4 * d + 2 * h + 2 * self.n_channels)
        return mean, log_var, idx, w, ws
