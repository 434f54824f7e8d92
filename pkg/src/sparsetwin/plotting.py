"""Static figure emission.

Every plot renders from persisted JSON/CSV/arrays only; nothing here runs a
model.  Figures are written as PNG files next to the numeric outputs they
visualize.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_field(field_2d: np.ndarray, out_path: Path, title: str = "", cmap: str = "RdBu_r") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(field_2d.T, origin="lower", cmap=cmap)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out_path)


def plot_importance_map(phi_2d: np.ndarray, out_path: Path, title: str = "importance score") -> Path:
    return plot_field(phi_2d, out_path, title=title, cmap="viridis")


def plot_field_comparison(truth: np.ndarray, pred: np.ndarray, out_path: Path, labels=("truth", "prediction")) -> Path:
    err = np.abs(pred - truth)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    vmin, vmax = truth.min(), truth.max()
    for ax, (name, f) in zip(
        axes, [(labels[0], truth), (labels[1], pred), ("|error|", err)]
    ):
        im = ax.imshow(f.T, origin="lower", cmap="RdBu_r" if name != "|error|" else "magma",
                       vmin=vmin if name != "|error|" else None,
                       vmax=vmax if name != "|error|" else None)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out_path)


def plot_error_vs_sensors(rows: list[dict], out_path: Path) -> Path:
    """rows: [{"n_sensors": ..., "rel_l2": ..., "model": ...}, ...]"""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_model: dict[str, list] = {}
    for row in rows:
        by_model.setdefault(str(row.get("model", "model")), []).append(row)
    for model, model_rows in sorted(by_model.items()):
        model_rows = sorted(model_rows, key=lambda r: r["n_sensors"])
        ax.plot(
            [r["n_sensors"] for r in model_rows],
            [r["rel_l2"] for r in model_rows],
            marker="o",
            label=model,
        )
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("number of sensors")
    ax.set_ylabel("relative L2 error")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_rollout_error(curves: dict[str, np.ndarray], out_path: Path, dt: float = 1.0) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, errs in curves.items():
        ax.plot(dt * np.arange(1, len(errs) + 1), errs, label=label)
    ax.set_xlabel("forecast step")
    ax.set_ylabel("relative L2 error")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_spectra(k: np.ndarray, spectra: dict[str, np.ndarray], out_path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, power in spectra.items():
        ax.loglog(k, np.maximum(power, 1e-30), label=label)
    ax.set_xlabel("wavenumber shell")
    ax.set_ylabel("shell power")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    return _save(fig, out_path)


def plot_cost_scaling(csv_path: Path, out_path: Path, x_key: str, y_key: str = "score_elements") -> Path:
    with Path(csv_path).open() as fh:
        rows = list(csv.DictReader(fh))
    xs = np.array([float(r[x_key]) for r in rows])
    ys = np.array([float(r[y_key]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(xs, ys, marker="o")
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    ax.grid(alpha=0.3, which="both")
    ax.set_title(Path(csv_path).stem)
    return _save(fig, out_path)


def plot_loss_history(csv_path: Path, out_path: Path) -> Path:
    with Path(csv_path).open() as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    totals = [float(r["total"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, totals)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_latent_pca(leaders: np.ndarray, out_path: Path, n_obs: int | None = None) -> Path:
    """2-D PCA projection of a leader-token trajectory."""
    centered = leaders - leaders.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(proj[:, 0], proj[:, 1], "-", alpha=0.6, lw=0.8)
    split = n_obs if n_obs is not None else 0
    if split:
        ax.plot(proj[:split, 0], proj[:split, 1], "o", ms=3, label="observed window")
        ax.plot(proj[split:, 0], proj[split:, 1], ".", ms=2, label="rollout")
        ax.legend()
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.grid(alpha=0.3)
    return _save(fig, out_path)
