import numpy as np
import pytest
import torch

from sparsetwin.dataio import build_dataset
from sparsetwin.encoder import EncoderConfig
from sparsetwin.model import FieldModel, ModelConfig
from sparsetwin.reconstructor import ReconstructorConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_dataset():
    """4 cases x 6 frames on an 8x8 grid, 2 channels, deterministic."""
    rng = np.random.default_rng(7)
    n = 8
    raw = rng.normal(size=(4, 6, n * n, 2))
    axis = np.arange(n, dtype=float)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel()], axis=-1)
    return build_dataset(raw, coords, dt=0.5, channel_names=["u", "v"], split_seed=0)


def small_model_config(
    n_channels=2, latent_dim=16, n_latents=4, n_freq=8, top_k=4, variant="full"
) -> ModelConfig:
    return ModelConfig(
        variant=variant,
        encoder=EncoderConfig(
            n_channels=n_channels, latent_dim=latent_dim, n_latents=n_latents, n_freq=n_freq
        ),
        recon=ReconstructorConfig(top_k=top_k, fusion_hidden=2 * latent_dim),
        importance_hidden=16,
    )


@pytest.fixture
def small_model():
    return FieldModel(small_model_config())
