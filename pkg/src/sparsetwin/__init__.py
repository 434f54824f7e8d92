"""Sparse-sensor field reconstruction and latent forecasting toolkit."""

from .dataio import (
    FieldDataset,
    NormStats,
    build_dataset,
    load_dataset,
    normalize_fields,
    rescale_coords,
    save_dataset,
    split_cases,
)
from .model import FieldModel, LatentState, ModelConfig, load_model, save_model
from .sensing import SensorSet, make_forecast_task, make_observation, sample_sensors
from .simulate import FhnConfig, generate_advection, generate_fhn, generate_localized

__version__ = "0.1.0"

__all__ = [
    "FieldDataset",
    "NormStats",
    "build_dataset",
    "load_dataset",
    "normalize_fields",
    "rescale_coords",
    "save_dataset",
    "split_cases",
    "FieldModel",
    "LatentState",
    "ModelConfig",
    "load_model",
    "save_model",
    "SensorSet",
    "make_forecast_task",
    "make_observation",
    "sample_sensors",
    "FhnConfig",
    "generate_advection",
    "generate_fhn",
    "generate_localized",
    "__version__",
]
