"""Evaluation metrics: relative L2, energy spectra, log-spectral distance,
joint PDFs with Jensen-Shannon divergence, correlation lengths, error PDFs.

All functions are pure and operate on numpy arrays.  Spectral quantities are
defined on regular periodic grids only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SPECTRAL_FLOOR = 1e-30
CORR_THRESHOLD = float(np.exp(-1.0))


def rel_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """||pred - truth||_2 / ||truth||_2 over all points and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth.ravel())
    if denom == 0.0:
        raise ValueError("truth has zero norm; relative L2 undefined")
    return float(np.linalg.norm((pred - truth).ravel()) / denom)


@dataclass
class SpectrumReport:
    """Isotropically binned power spectrum.

    ``k`` are integer shell numbers (cycles per domain), DC excluded.  With
    the DFT normalized by grid size, the shell powers sum to the field
    variance (Parseval).
    """

    k: np.ndarray
    power: np.ndarray
    counts: np.ndarray

    @property
    def total_power(self) -> float:
        return float(self.power.sum())


def energy_spectrum(field: np.ndarray) -> SpectrumReport:
    """2-D FFT power, binned into integer-|k| shells (DC excluded)."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"energy_spectrum expects a 2-D grid field, got shape {field.shape}")
    ny, nx = field.shape
    coeff = np.fft.fft2(field) / (ny * nx)
    power = np.abs(coeff) ** 2
    ky = np.fft.fftfreq(ny) * ny
    kx = np.fft.fftfreq(nx) * nx
    shells = np.rint(np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)).astype(np.int64)
    k_max = shells.max()
    binned = np.bincount(shells.ravel(), weights=power.ravel(), minlength=k_max + 1)
    counts = np.bincount(shells.ravel(), minlength=k_max + 1)
    # shell 0 is the mean; drop it so sum(power) equals the variance
    return SpectrumReport(
        k=np.arange(1, k_max + 1),
        power=binned[1:],
        counts=counts[1:],
    )


def lsd(power: np.ndarray, power_hat: np.ndarray, floor: float = SPECTRAL_FLOOR) -> float:
    """RMS distance between log10 spectra; exactly 1 for a uniform factor 10."""
    power = np.asarray(power, dtype=np.float64)
    power_hat = np.asarray(power_hat, dtype=np.float64)
    if power.shape != power_hat.shape:
        raise ValueError(f"spectra length mismatch: {power.shape} vs {power_hat.shape}")
    if np.any(power <= 0) or np.any(power_hat <= 0):
        warnings.warn("non-positive spectral bins floored before log", RuntimeWarning, stacklevel=2)
    lp = np.log10(np.maximum(power, floor))
    lq = np.log10(np.maximum(power_hat, floor))
    return float(np.sqrt(np.mean((lp - lq) ** 2)))


def joint_pdf(
    a: np.ndarray,
    b: np.ndarray,
    bins: int = 32,
    ranges: tuple[tuple[float, float], tuple[float, float]] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """2-D histogram of two channels, normalized to unit total mass."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    hist, xe, ye = np.histogram2d(a, b, bins=bins, range=ranges)
    total = hist.sum()
    if total > 0:
        hist = hist / total
    return hist, xe, ye


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats between histograms on the same grid.

    Bounded by ln 2; empty bins follow the 0 * ln(0/x) = 0 convention.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms must share a bin grid: {p.shape} vs {q.shape}")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def _kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _first_crossing(lags: np.ndarray, corr: np.ndarray, threshold: float) -> tuple[float, bool]:
    """First lag where corr drops below threshold, linearly interpolated."""
    below = np.flatnonzero(corr < threshold)
    if below.size == 0:
        return float(lags[-1]), True
    j = below[0]
    if j == 0:
        return float(lags[0]), False
    c0, c1 = corr[j - 1], corr[j]
    frac = (c0 - threshold) / (c0 - c1)
    return float(lags[j - 1] + frac * (lags[j] - lags[j - 1])), False


def spatial_corr_length(
    field: np.ndarray, dx: float = 1.0, threshold: float = CORR_THRESHOLD
) -> tuple[float, bool]:
    """Spatial correlation length of a periodic 2-D field.

    The power spectrum is binned isotropically and cosine-transformed back to
    a radial correlation profile, so a pure tone cos(k x) yields exactly
    cos(k r) with the 1/e crossing at arccos(1/e)/k.  Returns (length,
    saturated); saturated means the profile never crossed within half the
    domain.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"spatial_corr_length expects a 2-D grid field, got {field.shape}")
    spec = energy_spectrum(field - field.mean())
    total = spec.total_power
    if total <= 0:
        return float(field.shape[0] * dx / 2.0), True
    n = field.shape[0]
    length = n * dx
    r = dx * np.arange(0, n // 2 + 1)
    angular = 2.0 * np.pi * spec.k / length
    corr = (spec.power[None, :] * np.cos(angular[None, :] * r[:, None])).sum(axis=1) / total
    return _first_crossing(r, corr, threshold)


def temporal_corr_length(
    series: np.ndarray, dt: float = 1.0, threshold: float = CORR_THRESHOLD
) -> tuple[float, bool]:
    """Temporal correlation length of a [n_t] or [n_t, n_points] series.

    Per-point autocorrelations (mean removed per point, unbiased in the lag)
    are pooled before normalizing, then the 1/e crossing is interpolated.
    Lags are limited to half the record length.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    n_t = series.shape[0]
    if n_t < 4:
        raise ValueError("need at least 4 time samples")
    fluct = series - series.mean(axis=0, keepdims=True)
    max_lag = n_t // 2
    corr = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        prods = fluct[: n_t - lag] * fluct[lag:]
        corr[lag] = prods.sum() / (n_t - lag)
    if corr[0] <= 0:
        return float(max_lag * dt), True
    corr /= corr[0]
    lags = dt * np.arange(max_lag + 1)
    return _first_crossing(lags, corr, threshold)


@dataclass
class ErrorPdf:
    density: np.ndarray
    edges: np.ndarray
    tail_mass: float
    tail_threshold: float


def error_pdf(
    errors: np.ndarray,
    bins: int = 64,
    value_range: tuple[float, float] | None = None,
    tail_threshold: float = 3.0,
) -> ErrorPdf:
    """Normalized error histogram plus heavy-tail mass beyond a threshold."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if not np.all(np.isfinite(errors)):
        raise ValueError("errors contain non-finite values")
    density, edges = np.histogram(errors, bins=bins, range=value_range, density=True)
    tail = float(np.mean(np.abs(errors) > tail_threshold))
    return ErrorPdf(density=density, edges=edges, tail_mass=tail, tail_threshold=tail_threshold)


def to_grid(flat_field: np.ndarray, n_grid: int) -> np.ndarray:
    """Reshape a flattened row-major square-grid field back to 2-D."""
    flat_field = np.asarray(flat_field)
    if flat_field.shape[-1] != n_grid * n_grid:
        raise ValueError(
            f"cannot reshape {flat_field.shape[-1]} points to a {n_grid}x{n_grid} grid"
        )
    return flat_field.reshape(*flat_field.shape[:-1], n_grid, n_grid)
