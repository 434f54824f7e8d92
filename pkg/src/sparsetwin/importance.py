"""Variational spatial importance scores.

A coordinate-conditioned network predicts Beta posterior parameters; the
posterior mean is the deterministic importance score used for neighbor
selection and dynamics gating.  An auxiliary loss pulls importance toward
regions of persistently high predicted reconstruction uncertainty while
regularizing against a Beta prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

PARAM_EPS = 1e-6


class ImportanceNet(nn.Module):
    """Coords -> (alpha(x), beta(x)) via exp heads, strictly positive."""

    def __init__(self, n_dim: int = 2, hidden: int = 64, n_layers: int = 2, eps: float = PARAM_EPS):
        super().__init__()
        self.eps = eps
        layers: list[nn.Module] = []
        width = n_dim
        for _ in range(n_layers):
            layers += [nn.Linear(width, hidden), nn.GELU()]
            width = hidden
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw = self.head(self.body(x))
        alpha = torch.exp(raw[..., 0]) + self.eps
        beta = torch.exp(raw[..., 1]) + self.eps
        return alpha, beta

    def phi(self, x: torch.Tensor) -> torch.Tensor:
        alpha, beta = self(x)
        return posterior_mean(alpha, beta)


def posterior_mean(alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Deterministic score phi_bar = alpha / (alpha + beta), in (0, 1)."""
    return alpha / (alpha + beta)


def sample_phi(
    alpha: torch.Tensor,
    beta: torch.Tensor,
    n_samples: int = 1,
    seed: int | None = None,
) -> torch.Tensor:
    """Reparameterized Beta samples, shape [n_samples, *alpha.shape].

    Gradients flow into (alpha, beta) pathwise.  A seed forks the global RNG
    so concurrent evaluations stay reproducible.
    """
    dist = torch.distributions.Beta(alpha, beta)
    if seed is None:
        return dist.rsample((n_samples,))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return dist.rsample((n_samples,))


def _log_beta_fn(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.lgamma(a) + torch.lgamma(b) - torch.lgamma(a + b)


def kl_beta(alpha, beta, alpha0, beta0) -> torch.Tensor:
    """Analytic KL(Beta(alpha, beta) || Beta(alpha0, beta0)), elementwise."""
    a, b = torch.as_tensor(alpha, dtype=torch.float64), torch.as_tensor(beta, dtype=torch.float64)
    a0, b0 = torch.as_tensor(alpha0, dtype=torch.float64), torch.as_tensor(beta0, dtype=torch.float64)
    a, b, a0, b0 = torch.broadcast_tensors(a, b, a0, b0)
    if torch.any(a <= 0) or torch.any(b <= 0) or torch.any(a0 <= 0) or torch.any(b0 <= 0):
        raise ValueError("Beta parameters must be positive")
    return (
        _log_beta_fn(a0, b0)
        - _log_beta_fn(a, b)
        + (a - a0) * torch.digamma(a)
        + (b - b0) * torch.digamma(b)
        + (a0 + b0 - a - b) * torch.digamma(a + b)
    )


def beta_entropy(alpha, beta) -> torch.Tensor:
    """Differential entropy of Beta(alpha, beta), elementwise."""
    a = torch.as_tensor(alpha, dtype=torch.float64)
    b = torch.as_tensor(beta, dtype=torch.float64)
    a, b = torch.broadcast_tensors(a, b)
    if torch.any(a <= 0) or torch.any(b <= 0):
        raise ValueError("Beta parameters must be positive")
    return (
        _log_beta_fn(a, b)
        - (a - 1) * torch.digamma(a)
        - (b - 1) * torch.digamma(b)
        + (a + b - 2) * torch.digamma(a + b)
    )


def uncertainty_target(sigma2: torch.Tensor) -> torch.Tensor:
    """Min-max normalize a predicted-variance field into [0, 1].

    The target is detached: importance is supervised FROM uncertainty, and
    letting gradients flow back into the variance head through the target
    would reward inflating predicted variance.  A constant field maps to
    all-zeros (neutral target) rather than dividing by zero.
    """
    sigma2 = sigma2.detach()
    lo = sigma2.min()
    hi = sigma2.max()
    span = hi - lo
    if span <= 0:
        return torch.zeros_like(sigma2)
    return (sigma2 - lo) / span


@dataclass
class ImportanceLossWeights:
    """Weights of the auxiliary objective; none are given upstream, so these
    are documented defaults and are logged into every run manifest."""

    kl: float = 1e-3
    entropy: float = 1e-4
    spatial_var: float = 1e-3
    prior_alpha: float = 1.0
    prior_beta: float = 1.0
    mc_samples: int = 4


def importance_loss(
    target: torch.Tensor,
    alpha: torch.Tensor,
    beta: torch.Tensor,
    weights: ImportanceLossWeights | None = None,
    seed: int | None = None,
    analytic_expectation: bool = False,
) -> tuple[torch.Tensor, dict]:
    """Auxiliary objective over a set of spatial points.

    total = -mean_x[U(x) * phi(x)]  (Monte Carlo over the posterior)
            + kl_w * mean_x KL(q || prior)
            - h_w * mean_x H[q]
            - v_w * Var_x[phi_bar]

    The signs are as stated: minimizing the total rewards broad posteriors and
    a spatially non-degenerate score field.  ``analytic_expectation`` swaps
    the Monte Carlo utility term for its closed form -mean(U * phi_bar),
    which gradient checks rely on.
    """
    w = weights or ImportanceLossWeights()
    if w.mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    phi_bar = posterior_mean(alpha, beta)
    if analytic_expectation:
        utility = -(target * phi_bar).mean()
    else:
        samples = sample_phi(alpha, beta, n_samples=w.mc_samples, seed=seed)
        utility = -(target.unsqueeze(0) * samples).mean()
    kl = kl_beta(alpha, beta, w.prior_alpha, w.prior_beta).mean().to(alpha.dtype)
    entropy = beta_entropy(alpha, beta).mean().to(alpha.dtype)
    spatial_var = phi_bar.var(unbiased=False)
    total = utility + w.kl * kl - w.entropy * entropy - w.spatial_var * spatial_var
    components = {
        "utility": float(utility.detach()),
        "kl": float(kl.detach()),
        "entropy": float(entropy.detach()),
        "spatial_var": float(spatial_var.detach()),
    }
    return total, components
