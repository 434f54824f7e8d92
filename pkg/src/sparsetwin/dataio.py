"""Unified dataset container, normalization, splitting, and on-disk format.

Every generator emits the same layout: a field tensor ``[n_cases, n_t, n_p,
n_c]`` plus a coordinate array ``[n_p, n_d]``, stored as raw little-endian
float32 payloads next to a JSON manifest.  Normalization statistics are
computed on the training split only and applied everywhere, so the test split
never leaks into the preprocessing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
STD_FLOOR = 1e-8

_DTYPE_TAGS = {"<f4": "f32", "<f8": "f64", "<i8": "i64"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class DatasetFormatError(RuntimeError):
    """Raised when a manifest and its payload disagree, or the format is unknown.

    Deliberately distinct from FileNotFoundError so callers can tell a missing
    artifact from a corrupt one.
    """


@dataclass
class NormStats:
    """Per-channel standardization constants plus coordinate bounds."""

    mean: np.ndarray
    std: np.ndarray
    coord_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coord_max: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "mean": np.asarray(self.mean, dtype=np.float64).tolist(),
            "std": np.asarray(self.std, dtype=np.float64).tolist(),
            "coord_min": np.asarray(self.coord_min, dtype=np.float64).tolist(),
            "coord_max": np.asarray(self.coord_max, dtype=np.float64).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            coord_min=np.asarray(d["coord_min"], dtype=np.float64),
            coord_max=np.asarray(d["coord_max"], dtype=np.float64),
        )


@dataclass
class FieldDataset:
    """Normalized fields ``[n_cases, n_t, n_p, n_c]`` with shared coordinates.

    Invariants: coordinates lie in [-1, 1], fields are finite float32, and the
    coordinate row count matches ``n_p`` of the field tensor.
    """

    fields: np.ndarray
    coords: np.ndarray
    dt: float
    channel_names: list[str]
    norm: NormStats
    split_seed: int
    train_frac: float = 0.85
    provenance: dict = field(default_factory=dict)

    @property
    def n_cases(self) -> int:
        return self.fields.shape[0]

    @property
    def n_t(self) -> int:
        return self.fields.shape[1]

    @property
    def n_p(self) -> int:
        return self.fields.shape[2]

    @property
    def n_c(self) -> int:
        return self.fields.shape[3]

    @property
    def n_d(self) -> int:
        return self.coords.shape[1]

    def validate(self) -> None:
        if self.fields.ndim != 4:
            raise ValueError(f"fields must be 4-D, got shape {self.fields.shape}")
        if self.coords.ndim != 2:
            raise ValueError(f"coords must be 2-D, got shape {self.coords.shape}")
        if self.fields.shape[2] != self.coords.shape[0]:
            raise ValueError(
                f"n_p mismatch: fields have {self.fields.shape[2]} points, "
                f"coords have {self.coords.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.fields)):
            raise ValueError("fields contain non-finite values")
        if self.coords.size and (self.coords.min() < -1.0 - 1e-6 or self.coords.max() > 1.0 + 1e-6):
            raise ValueError("coords must lie within [-1, 1] after preparation")
        if len(self.channel_names) != self.n_c:
            raise ValueError("channel_names length must equal n_c")

    def train_test_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return split_cases(self.n_cases, self.train_frac, self.split_seed)

    def denormalized(self) -> np.ndarray:
        return denormalize_fields(self.fields, self.norm)


def compute_norm_stats(raw: np.ndarray, std_floor: float = STD_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all cases, times, and points of ``raw``."""
    if not np.all(np.isfinite(raw)):
        bad = [c for c in range(raw.shape[-1]) if not np.all(np.isfinite(raw[..., c]))]
        raise ValueError(f"non-finite values in channel(s) {bad}")
    flat = raw.reshape(-1, raw.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = std < std_floor
    if np.any(degenerate):
        warnings.warn(
            f"zero-variance channel(s) {np.flatnonzero(degenerate).tolist()}: "
            f"std clamped to {std_floor}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(degenerate, std_floor, std)
    return mean, std


def apply_normalization(raw: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (raw - mean) / std


def normalize_fields(
    raw: np.ndarray, std_floor: float = STD_FLOOR
) -> tuple[np.ndarray, NormStats]:
    """Standardize each channel to zero mean / unit variance.

    Returns the normalized array and the stats needed to invert the map.
    Degenerate (constant) channels get their std clamped to ``std_floor`` with
    a warning, which sends them to all-zeros.
    """
    mean, std = compute_norm_stats(raw, std_floor=std_floor)
    return apply_normalization(raw, mean, std), NormStats(mean=mean, std=std)


def denormalize_fields(fields: np.ndarray, stats: NormStats) -> np.ndarray:
    return fields * stats.std + stats.mean


def rescale_coords(raw_coords: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Affinely map each coordinate dimension onto [-1, 1]."""
    raw_coords = np.asarray(raw_coords, dtype=np.float64)
    lo = raw_coords.min(axis=0)
    hi = raw_coords.max(axis=0)
    degenerate = hi <= lo
    if np.any(degenerate):
        raise ValueError(
            f"degenerate coordinate dimension(s) {np.flatnonzero(degenerate).tolist()}: max == min"
        )
    scaled = 2.0 * (raw_coords - lo) / (hi - lo) - 1.0
    return scaled, (lo, hi)


def split_cases(n_cases: int, train_frac: float = 0.85, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic, disjoint, exhaustive case-level split.

    ``round(train_frac * n_cases)`` training cases, clamped so both splits keep
    at least one case.
    """
    if n_cases < 2:
        raise ValueError(f"need at least 2 cases to split, got {n_cases}")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_cases)
    n_train = int(round(train_frac * n_cases))
    n_train = min(max(n_train, 1), n_cases - 1)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return train, test


def build_dataset(
    raw_fields: np.ndarray,
    raw_coords: np.ndarray,
    dt: float,
    channel_names: list[str],
    split_seed: int = 0,
    train_frac: float = 0.85,
    provenance: dict | None = None,
    std_floor: float = STD_FLOOR,
) -> FieldDataset:
    """Assemble a FieldDataset from raw generator output.

    Coordinates are rescaled to [-1, 1]; normalization stats come from the
    training cases only and are then applied to the whole tensor.
    """
    coords, (lo, hi) = rescale_coords(raw_coords)
    train_idx, _ = split_cases(raw_fields.shape[0], train_frac, split_seed)
    mean, std = compute_norm_stats(raw_fields[train_idx], std_floor=std_floor)
    stats = NormStats(mean=mean, std=std, coord_min=lo, coord_max=hi)
    fields = apply_normalization(raw_fields, mean, std).astype(np.float32)
    ds = FieldDataset(
        fields=fields,
        coords=coords.astype(np.float32),
        dt=float(dt),
        channel_names=list(channel_names),
        norm=stats,
        split_seed=int(split_seed),
        train_frac=float(train_frac),
        provenance=dict(provenance or {}),
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# binary + manifest storage (shared by datasets and checkpoints)
# ---------------------------------------------------------------------------


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    """Write named arrays as raw little-endian payloads plus manifest.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPE_TAGS:
            dtype = "<f4"
            arr = arr.astype(np.float32)
        tag = _DTYPE_TAGS[dtype]
        fname = f"{name}.{tag}"
        (path / fname).write_bytes(arr.astype(dtype).tobytes(order="C"))
        entries[name] = {"file": fname, "dtype": tag, "shape": list(arr.shape)}
    manifest = {"format_version": FORMAT_VERSION, "arrays": entries}
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a binary+manifest directory; validates shapes against payloads."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unknown format version {version!r} in {manifest_path}")
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        fpath = path / entry["file"]
        if not fpath.exists():
            raise FileNotFoundError(f"payload {fpath} listed in manifest is missing")
        dtype = np.dtype(_TAG_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize
        raw = fpath.read_bytes()
        if len(raw) != expected:
            raise DatasetFormatError(
                f"{fpath}: payload has {len(raw)} bytes, manifest shape {shape} "
                f"needs {expected}"
            )
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, manifest


def save_dataset(ds: FieldDataset, path: str | Path) -> Path:
    ds.validate()
    return save_arrays(
        path,
        {"fields": ds.fields.astype(np.float32), "coords": ds.coords.astype(np.float32)},
        extra={
            "kind": "field_dataset",
            "dt": ds.dt,
            "channel_names": ds.channel_names,
            "norm": ds.norm.to_dict(),
            "split_seed": ds.split_seed,
            "train_frac": ds.train_frac,
            "provenance": ds.provenance,
        },
    )


def load_dataset(path: str | Path) -> FieldDataset:
    arrays, manifest = load_arrays(path)
    if "fields" not in arrays or "coords" not in arrays:
        raise DatasetFormatError(f"{path}: manifest lacks fields/coords arrays")
    ds = FieldDataset(
        fields=arrays["fields"],
        coords=arrays["coords"],
        dt=float(manifest["dt"]),
        channel_names=list(manifest["channel_names"]),
        norm=NormStats.from_dict(manifest["norm"]),
        split_seed=int(manifest["split_seed"]),
        train_frac=float(manifest["train_frac"]),
        provenance=manifest.get("provenance", {}),
    )
    try:
        ds.validate()
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    return ds
