"""Sparse sensor sampling and observation/forecast task assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import FieldDataset


@dataclass
class SensorSet:
    """N sensors at one time step: indices into the dataset coords, their
    positions in [-1, 1]^d, and the observed (normalized) values."""

    indices: np.ndarray
    x: np.ndarray
    u: np.ndarray
    t_index: int
    case_index: int = 0

    @property
    def n_sensors(self) -> int:
        return len(self.indices)


@dataclass
class ForecastTask:
    """An observed window of sparse frames plus ground truth for scoring.

    Sensor indices are fixed across the window; the scoring horizon never
    overlaps the observation window.
    """

    indices: np.ndarray
    case: int
    t0: int
    n_obs: int
    horizon: int
    observed: list[SensorSet]
    window_truth: np.ndarray  # [n_obs, n_p, n_c]
    horizon_truth: np.ndarray  # [horizon, n_p, n_c]
    seed: int | None = None

    def descriptor(self) -> dict:
        return {
            "indices": np.asarray(self.indices).tolist(),
            "case": int(self.case),
            "t0": int(self.t0),
            "n_obs": int(self.n_obs),
            "horizon": int(self.horizon),
            "seed": self.seed,
        }

    def save_descriptor(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.descriptor(), indent=2))


def sample_sensors(n_p: int, n_sensors: int, seed: int = 0) -> np.ndarray:
    """Uniform sample of sensor indices without replacement, sorted ascending."""
    if not 1 <= n_sensors <= n_p:
        raise ValueError(f"need 1 <= n_sensors <= n_p, got n_sensors={n_sensors}, n_p={n_p}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_p, size=n_sensors, replace=False))


def make_observation(ds: FieldDataset, case: int, t: int, indices: np.ndarray) -> SensorSet:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < 1:
        raise ValueError("empty sensor index set")
    if indices.min() < 0 or indices.max() >= ds.n_p:
        raise ValueError(f"sensor index out of range [0, {ds.n_p})")
    if not 0 <= case < ds.n_cases:
        raise ValueError(f"case {case} out of range [0, {ds.n_cases})")
    if not 0 <= t < ds.n_t:
        raise ValueError(f"t {t} out of range [0, {ds.n_t})")
    return SensorSet(
        indices=indices,
        x=ds.coords[indices],
        u=ds.fields[case, t, indices],
        t_index=int(t),
        case_index=int(case),
    )


def make_forecast_task(
    ds: FieldDataset,
    case: int,
    t0: int,
    indices: np.ndarray,
    n_obs: int = 16,
    horizon: int = 0,
    seed: int | None = None,
) -> ForecastTask:
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    max_h = ds.n_t - t0 - n_obs
    if horizon > max_h:
        raise ValueError(
            f"horizon {horizon} overruns trajectory: max admissible horizon is {max_h}"
        )
    observed = [make_observation(ds, case, t0 + k, indices) for k in range(n_obs)]
    return ForecastTask(
        indices=np.asarray(indices, dtype=np.int64),
        case=int(case),
        t0=int(t0),
        n_obs=int(n_obs),
        horizon=int(horizon),
        observed=observed,
        window_truth=ds.fields[case, t0 : t0 + n_obs].copy(),
        horizon_truth=ds.fields[case, t0 + n_obs : t0 + n_obs + horizon].copy(),
        seed=seed,
    )


def load_forecast_task(ds: FieldDataset, descriptor: dict | str | Path) -> ForecastTask:
    """Rebuild a task from its JSON descriptor against the same dataset."""
    if not isinstance(descriptor, dict):
        descriptor = json.loads(Path(descriptor).read_text())
    return make_forecast_task(
        ds,
        case=descriptor["case"],
        t0=descriptor["t0"],
        indices=np.asarray(descriptor["indices"], dtype=np.int64),
        n_obs=descriptor["n_obs"],
        horizon=descriptor["horizon"],
        seed=descriptor.get("seed"),
    )
