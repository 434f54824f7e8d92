"""Composite reconstruction model: encoder + importance field + decoder.

Three variants share one code path:

* ``full``      - learned importance warps selection and scales aggregation
* ``uniform``   - importance frozen at 1, reducing selection to Euclidean kNN
* ``global``    - the local branch is dropped; queries decode from the global
                  token and their positional embedding only
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dataio
from .encoder import EncoderConfig, SensorEncoder
from .importance import ImportanceNet, posterior_mean
from .reconstructor import ReconstructionOutput, Reconstructor, ReconstructorConfig

VARIANTS = ("full", "uniform", "global")


@dataclass
class LatentState:
    """Structured latent state: one global token, per-sensor tokens, and the
    importance scores read off at the sensor coordinates."""

    z_global: torch.Tensor  # [..., D]
    z_local: torch.Tensor  # [..., N, D]
    phi: torch.Tensor  # [N]

    @property
    def n_sensors(self) -> int:
        return self.z_local.shape[-2]


@dataclass
class ModelConfig:
    variant: str = "full"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    recon: ReconstructorConfig = field(default_factory=ReconstructorConfig)
    importance_hidden: int = 64

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.encoder.validate()
        self.recon.validate()

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "encoder": asdict(self.encoder),
            "recon": asdict(self.recon),
            "importance_hidden": self.importance_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            variant=d["variant"],
            encoder=EncoderConfig(**d["encoder"]),
            recon=ReconstructorConfig(**d["recon"]),
            importance_hidden=d["importance_hidden"],
        )


class FieldModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = SensorEncoder(cfg.encoder)
        self.importance = (
            ImportanceNet(cfg.encoder.n_dim, hidden=cfg.importance_hidden)
            if cfg.variant == "full"
            else None
        )
        self.reconstructor = Reconstructor(
            cfg.recon,
            latent_dim=cfg.encoder.latent_dim,
            n_channels=cfg.encoder.n_channels,
            fourier=self.encoder.fourier,
        )

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def phi_at(self, x: torch.Tensor) -> torch.Tensor:
        """Importance scores at coordinates x [..., d]; ones for ablations."""
        if self.importance is None:
            return torch.ones(x.shape[:-1], dtype=x.dtype, device=x.device)
        alpha, beta = self.importance(x)
        return posterior_mean(alpha, beta)

    def encode(self, sensor_x: torch.Tensor, sensor_u: torch.Tensor) -> LatentState:
        z_global, z_local = self.encoder(sensor_x, sensor_u)
        return LatentState(z_global=z_global, z_local=z_local, phi=self.phi_at(sensor_x))

    def reconstruct(
        self, state: LatentState, sensor_x: torch.Tensor, query_x: torch.Tensor
    ) -> ReconstructionOutput:
        return self.reconstructor(
            state.z_global,
            state.z_local,
            sensor_x,
            state.phi,
            query_x,
            use_local=self.variant != "global",
        )

    def forward(
        self, sensor_x: torch.Tensor, sensor_u: torch.Tensor, query_x: torch.Tensor
    ) -> ReconstructionOutput:
        return self.reconstruct(self.encode(sensor_x, sensor_u), sensor_x, query_x)


def save_model(model: FieldModel, path: str | Path) -> Path:
    """Checkpoint as named float arrays in the binary+manifest convention."""
    arrays = {
        name.replace(".", "__"): param.detach().cpu().numpy()
        for name, param in model.state_dict().items()
    }
    return dataio.save_arrays(
        path, arrays, extra={"kind": "field_model", "model_config": model.cfg.to_dict()}
    )


def load_model(path: str | Path) -> FieldModel:
    arrays, manifest = dataio.load_arrays(path)
    if manifest.get("kind") != "field_model":
        raise dataio.DatasetFormatError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = FieldModel(cfg)
    state = {
        name.replace("__", "."): torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in arrays.items()
    }
    model.load_state_dict(state)
    return model
