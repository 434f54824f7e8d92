"""Loss composition and the two-stage optimization.

Stage 1 trains the reconstruction path (encoder + importance + decoder) on
randomly sampled frames, sensors, and query points.  Stage 2 freezes stage 1,
encodes training trajectories with a fixed sensor set, and trains a latent
propagator teacher-forced on next-state prediction.  Reference mode runs
single-threaded for bit-reproducibility.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import dataio
from .baselines import CausalConfig, CausalPropagator, matched_causal_config
from .dynamics import LeaderFollowerDynamics, LfdConfig, rollout
from .importance import ImportanceLossWeights, importance_loss, uncertainty_target
from .metrics import rel_l2
from .model import FieldModel, ModelConfig

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}


def _as_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


@dataclass
class SensorSpec:
    """Sensor protocol during training.

    ``fixed=True`` draws one static array at the start of the run (a deployed
    sensor network); ``fixed_seed`` pins that draw independently of the
    training seed so several runs can share one deployment.  Otherwise
    positions are resampled every step.  Setting ``min_count``/``max_count``
    samples the count log-uniformly per step, which trains a model that
    accepts any sensor budget at evaluation time.
    """

    count: int = 64
    min_count: int | None = None
    max_count: int | None = None
    fixed: bool = False
    fixed_seed: int | None = None

    def fixed_indices(self, n_points: int, fallback_seed: int) -> np.ndarray:
        seed = self.fixed_seed if self.fixed_seed is not None else fallback_seed
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(n_points, size=self.count, replace=False))

    def sample_count(self, rng: np.random.Generator) -> int:
        if self.min_count is None or self.max_count is None:
            return self.count
        lo, hi = np.log(self.min_count), np.log(self.max_count)
        return int(round(np.exp(rng.uniform(lo, hi))))


@dataclass
class Stage1Config:
    steps: int = 1200
    lr: float = 2e-3
    min_lr_frac: float = 0.1
    batch_frames: int = 4
    n_queries: int = 512
    nll_weight: float = 0.05
    sensors: SensorSpec = field(default_factory=SensorSpec)
    importance: ImportanceLossWeights = field(default_factory=ImportanceLossWeights)
    seed: int = 0
    log_every: int = 50


@dataclass
class Stage2Config:
    propagator: str = "lfd"  # or "causal"
    steps: int = 400
    lr: float = 1e-3
    min_lr_frac: float = 0.1
    batch_windows: int = 8
    window: int = 16
    dt: float = 1.0
    sensor_count: int = 32
    sensor_seed: int = 0
    latent_weight: float = 1.0
    decode_weight: float = 0.0
    decode_queries: int = 256
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config | None = None
    reference_mode: bool = True


def _check_finite(total: torch.Tensor, components: dict) -> None:
    if not torch.isfinite(total) or float(total.detach()) > DIVERGENCE_LIMIT:
        bad = {k: v for k, v in components.items() if not np.isfinite(v) or abs(v) > DIVERGENCE_LIMIT}
        raise TrainingDivergence(f"loss diverged: {bad or components}", components)


def loss_stage1(
    model: FieldModel,
    sensor_x: torch.Tensor,
    sensor_u: torch.Tensor,
    query_x: torch.Tensor,
    query_u: torch.Tensor,
    cfg: Stage1Config,
    mc_seed: int | None = None,
) -> tuple[torch.Tensor, dict]:
    """MSE data term + heteroscedastic NLL (detached mean) + importance loss.

    The NLL trains the variance head against residuals of a frozen mean so
    calibration does not corrupt the MSE-optimal mean; the importance loss
    consumes the min-max-normalized, detached predicted variance.
    """
    state = model.encode(sensor_x, sensor_u)
    out = model.reconstruct(state, sensor_x, query_x)
    mse = ((out.mean - query_u) ** 2).mean()
    resid_sq = (query_u - out.mean.detach()) ** 2
    nll = 0.5 * (out.log_var + resid_sq / torch.exp(out.log_var)).mean()
    components = {"mse": float(mse.detach()), "nll": float(nll.detach())}
    total = mse + cfg.nll_weight * nll
    if model.importance is not None:
        sigma2 = out.variance.detach()
        while sigma2.dim() > 2:
            sigma2 = sigma2.mean(dim=0)
        target = uncertainty_target(sigma2.mean(dim=-1))
        alpha, beta = model.importance(query_x)
        l_phi, phi_comps = importance_loss(target, alpha, beta, cfg.importance, seed=mc_seed)
        total = total + l_phi
        components["importance"] = float(l_phi.detach())
        components.update({f"phi_{k}": v for k, v in phi_comps.items()})
    components["total"] = float(total.detach())
    _check_finite(total, components)
    return total, components


def train_stage1(
    model: FieldModel,
    ds: dataio.FieldDataset,
    cfg: Stage1Config,
    train_cases: np.ndarray | None = None,
) -> list[dict]:
    """Optimize the reconstruction path; returns the per-step loss history."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if train_cases is None:
        train_cases, _ = ds.train_test_indices()
    coords = ds.coords.astype(np.float32)
    fields = ds.fields
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.min_lr_frac
    )
    fixed_idx = None
    if cfg.sensors.fixed:
        fixed_idx = cfg.sensors.fixed_indices(ds.n_p, cfg.seed)
    history = []
    model.train()
    for step in range(cfg.steps):
        if fixed_idx is not None:
            n_sensors, sensor_idx = cfg.sensors.count, fixed_idx
        else:
            n_sensors = cfg.sensors.sample_count(rng)
            sensor_idx = np.sort(rng.choice(ds.n_p, size=n_sensors, replace=False))
        query_idx = rng.choice(ds.n_p, size=min(cfg.n_queries, ds.n_p), replace=False)
        cases = rng.choice(train_cases, size=cfg.batch_frames)
        times = rng.integers(0, ds.n_t, size=cfg.batch_frames)
        sensor_x = _as_tensor(coords[sensor_idx])
        query_x = _as_tensor(coords[query_idx])
        sensor_u = _as_tensor(fields[cases, times][:, sensor_idx])
        query_u = _as_tensor(fields[cases, times][:, query_idx])
        total, components = loss_stage1(
            model, sensor_x, sensor_u, query_x, query_u, cfg, mc_seed=cfg.seed * 100003 + step
        )
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        components["step"] = step
        components["lr"] = float(sched.get_last_lr()[0])
        components["n_sensors"] = int(n_sensors)
        history.append(components)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("stage1 step %d: total=%.4g mse=%.4g", step, components["total"], components["mse"])
    model.eval()
    return history


@torch.no_grad()
def evaluate_reconstruction(
    model: FieldModel,
    ds: dataio.FieldDataset,
    cases: np.ndarray,
    n_sensors: int,
    sensor_seeds=(0,),
    frame_stride: int = 1,
    frame_group: int = 8,
    sensor_indices: np.ndarray | None = None,
) -> float:
    """Mean test relative L2 over (sensor draw, case, frame).

    ``sensor_indices`` pins one explicit array (the fixed-deployment protocol)
    instead of drawing arrays from ``sensor_seeds``.
    """
    model.eval()
    coords = _as_tensor(ds.coords)
    errors = []
    seed_list = (None,) if sensor_indices is not None else tuple(sensor_seeds)
    for seed in seed_list:
        if sensor_indices is not None:
            sensor_idx = np.asarray(sensor_indices)
        else:
            rng = np.random.default_rng(seed)
            sensor_idx = np.sort(rng.choice(ds.n_p, size=n_sensors, replace=False))
        sensor_x = coords[sensor_idx]
        for case in np.asarray(cases).ravel():
            frames = np.arange(0, ds.n_t, frame_stride)
            for start in range(0, len(frames), frame_group):
                batch_t = frames[start : start + frame_group]
                sensor_u = _as_tensor(ds.fields[case][batch_t][:, sensor_idx])
                out = model(sensor_x, sensor_u, coords)
                pred = out.mean.cpu().numpy()
                for j, t in enumerate(batch_t):
                    errors.append(rel_l2(pred[j], ds.fields[case, t]))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# stage 2: latent dynamics
# ---------------------------------------------------------------------------


@torch.no_grad()
def encode_trajectories(
    model: FieldModel,
    ds: dataio.FieldDataset,
    cases: np.ndarray,
    sensor_idx: np.ndarray,
    frame_group: int = 16,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode whole trajectories with a fixed sensor set.

    Returns (leaders [n_cases, T, D], followers [n_cases, T, N, D], phi [N]).
    """
    model.eval()
    coords = _as_tensor(ds.coords)
    sensor_x = coords[sensor_idx]
    phi = model.phi_at(sensor_x)
    all_g, all_z = [], []
    for case in np.asarray(cases).ravel():
        gs, zs = [], []
        for start in range(0, ds.n_t, frame_group):
            u = _as_tensor(ds.fields[case, start : start + frame_group][:, sensor_idx])
            state = model.encode(sensor_x, u)
            gs.append(state.z_global)
            zs.append(state.z_local)
        all_g.append(torch.cat(gs, dim=0))
        all_z.append(torch.cat(zs, dim=0))
    return torch.stack(all_g), torch.stack(all_z), phi


def make_propagator(cfg: Stage2Config, latent_dim: int, reference_lfd: torch.nn.Module | None = None):
    if cfg.propagator == "lfd":
        return LeaderFollowerDynamics(
            LfdConfig(latent_dim=latent_dim, window=cfg.window, dt=cfg.dt)
        )
    if cfg.propagator == "causal":
        if reference_lfd is None:
            reference_lfd = LeaderFollowerDynamics(
                LfdConfig(latent_dim=latent_dim, window=cfg.window, dt=cfg.dt)
            )
        return CausalPropagator(
            matched_causal_config(reference_lfd, cfg.window, latent_dim, dt=cfg.dt)
        )
    raise ValueError(f"unknown propagator {cfg.propagator!r}")


def loss_stage2(
    propagator,
    g_hist: torch.Tensor,
    z_hist: torch.Tensor,
    g_target: torch.Tensor,
    z_target: torch.Tensor,
    phi: torch.Tensor,
    cfg: Stage2Config,
    decode_fn: Callable | None = None,
) -> tuple[torch.Tensor, dict]:
    """Teacher-forced next-latent regression, optionally plus a decoded-field term."""
    g_pred, z_pred = propagator.predict_next(g_hist, z_hist, phi)
    sq_sum = (g_pred - g_target).square().sum() + (z_pred - z_target).square().sum()
    latent_mse = sq_sum / (g_target.numel() + z_target.numel())
    total = cfg.latent_weight * latent_mse
    components = {"latent_mse": float(latent_mse.detach())}
    if cfg.decode_weight > 0 and decode_fn is not None:
        decode_mse = decode_fn(g_pred, z_pred)
        total = total + cfg.decode_weight * decode_mse
        components["decode_mse"] = float(decode_mse.detach())
    components["total"] = float(total.detach())
    _check_finite(total, components)
    return total, components


def train_stage2(
    propagator,
    leaders: torch.Tensor,
    followers: torch.Tensor,
    phi: torch.Tensor,
    cfg: Stage2Config,
    decode_fn: Callable | None = None,
) -> list[dict]:
    """Train a propagator on encoded trajectories [n_cases, T, (N,) D]."""
    torch.manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 1)
    n_cases, n_t = leaders.shape[0], leaders.shape[1]
    if n_t <= cfg.window:
        raise ValueError(f"trajectories of length {n_t} cannot fit window {cfg.window}")
    starts = [(c, t0) for c in range(n_cases) for t0 in range(n_t - cfg.window)]
    opt = torch.optim.Adam(propagator.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.min_lr_frac
    )
    history = []
    propagator.train()
    for step in range(cfg.steps):
        picks = rng.integers(0, len(starts), size=cfg.batch_windows)
        g_hist = torch.stack([leaders[starts[i][0], starts[i][1] : starts[i][1] + cfg.window] for i in picks])
        z_hist = torch.stack([followers[starts[i][0], starts[i][1] : starts[i][1] + cfg.window] for i in picks])
        g_tgt = torch.stack([leaders[starts[i][0], starts[i][1] + cfg.window] for i in picks])
        z_tgt = torch.stack([followers[starts[i][0], starts[i][1] + cfg.window] for i in picks])
        total, components = loss_stage2(propagator, g_hist, z_hist, g_tgt, z_tgt, phi, cfg, decode_fn)
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        components["step"] = step
        history.append(components)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("stage2 step %d: total=%.4g", step, components["total"])
    propagator.eval()
    return history


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


@torch.no_grad()
def decode_states(
    model: FieldModel,
    leaders: torch.Tensor,
    followers: torch.Tensor,
    phi: torch.Tensor,
    sensor_x: torch.Tensor,
    query_x: torch.Tensor,
    frame_group: int = 8,
) -> np.ndarray:
    """Decode a sequence of latent states to full fields [T, n_q, n_c]."""
    outs = []
    for start in range(0, leaders.shape[0], frame_group):
        g = leaders[start : start + frame_group]
        z = followers[start : start + frame_group]
        out = model.reconstructor(
            g, z, sensor_x, phi, query_x, use_local=model.variant != "global"
        )
        outs.append(out.mean.cpu().numpy())
    return np.concatenate(outs, axis=0)


@torch.no_grad()
def forecast_rollout(
    model: FieldModel,
    propagator,
    ds: dataio.FieldDataset,
    case: int,
    t0: int,
    sensor_idx: np.ndarray,
    n_obs: int = 16,
    horizon: int = 50,
):
    """Observe a sparse window, roll the latent state forward, decode.

    Returns (trajectory, decoded_fields [n_decoded, n_p, n_c]) where decoded
    fields start at the first forecast step; if the rollout diverged early,
    only the finite prefix is decoded.
    """
    coords = _as_tensor(ds.coords)
    sensor_x = coords[sensor_idx]
    us = _as_tensor(ds.fields[case, t0 : t0 + n_obs][:, sensor_idx])
    state = model.encode(sensor_x, us)
    traj = rollout(propagator, state.z_global, state.z_local, state.phi, horizon)
    leaders = torch.from_numpy(traj.leaders[n_obs:])
    followers = torch.from_numpy(traj.followers[n_obs:])
    if leaders.shape[0] == 0:
        return traj, np.zeros((0, ds.n_p, ds.n_c), dtype=np.float32)
    decoded = decode_states(model, leaders, followers, torch.from_numpy(traj.phi), sensor_x, coords)
    return traj, decoded


def rollout_errors(decoded: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-step relative L2 of a decoded forecast against ground truth."""
    n = min(decoded.shape[0], truth.shape[0])
    return np.array([rel_l2(decoded[t], truth[t]) for t in range(n)])


def divergence_step(decoded: np.ndarray, truth: np.ndarray, horizon: int, threshold: float = 1.0) -> int:
    """First forecast step that is missing, non-finite, or worse than the
    threshold in relative L2; returns horizon + 1 if none diverge."""
    for t in range(horizon):
        if t >= decoded.shape[0] or not np.all(np.isfinite(decoded[t])):
            return t
        if t < truth.shape[0] and rel_l2(decoded[t], truth[t]) > threshold:
            return t
    return horizon + 1


# ---------------------------------------------------------------------------
# full pipeline + gradient checking
# ---------------------------------------------------------------------------


def train(cfg: TrainConfig, ds: dataio.FieldDataset, out_dir: str | Path) -> dict:
    """Run the staged pipeline and persist a self-describing run directory."""
    from .model import save_model  # local import to keep module load light

    if cfg.reference_mode:
        torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_dict = {
        "model": cfg.model.to_dict(),
        "stage1": _stage1_dict(cfg.stage1),
        "stage2": _stage2_dict(cfg.stage2) if cfg.stage2 else None,
        "reference_mode": cfg.reference_mode,
    }
    (out_dir / "config.json").write_text(json.dumps(config_dict, indent=2, sort_keys=True))

    t_start = time.time()
    torch.manual_seed(cfg.stage1.seed)
    model = FieldModel(cfg.model)
    history1 = train_stage1(model, ds, cfg.stage1)
    _write_history(out_dir / "losses_stage1.csv", history1)
    save_model(model, out_dir / "checkpoints" / "stage1")

    report: dict = {
        "stage1_final": history1[-1] if history1 else {},
        "config": config_dict,
    }

    if cfg.stage2 is not None:
        s2 = cfg.stage2
        train_cases, _ = ds.train_test_indices()
        rng = np.random.default_rng(s2.sensor_seed)
        sensor_idx = np.sort(rng.choice(ds.n_p, size=s2.sensor_count, replace=False))
        leaders, followers, phi = encode_trajectories(model, ds, train_cases, sensor_idx)
        propagator = make_propagator(s2, cfg.model.encoder.latent_dim)
        history2 = train_stage2(propagator, leaders, followers, phi, s2)
        _write_history(out_dir / "losses_stage2.csv", history2)
        _save_propagator(out_dir / "checkpoints" / "stage2", propagator, s2)
        (out_dir / "stage2_sensors.json").write_text(json.dumps(sensor_idx.tolist()))
        report["stage2_final"] = history2[-1] if history2 else {}

    _, test_cases = ds.train_test_indices()
    report["test_rel_l2"] = evaluate_reconstruction(
        model, ds, test_cases, cfg.stage1.sensors.count, frame_stride=4
    )
    report["runtime_s"] = time.time() - t_start
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def _stage1_dict(cfg: Stage1Config) -> dict:
    d = asdict(cfg)
    return d


def _stage2_dict(cfg: Stage2Config) -> dict:
    return asdict(cfg)


def _write_history(path: Path, history: list[dict]) -> None:
    if not history:
        return
    keys: list[str] = []
    for row in history:
        for key in row:
            if key not in keys:
                keys.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(history)


def _save_propagator(path: Path, propagator, cfg: Stage2Config) -> None:
    arrays = {
        name.replace(".", "__"): p.detach().cpu().numpy()
        for name, p in propagator.state_dict().items()
    }
    extra = {
        "kind": "propagator",
        "propagator": cfg.propagator,
        "stage2_config": _stage2_dict(cfg),
    }
    if isinstance(propagator, CausalPropagator):
        extra["causal_config"] = asdict(propagator.cfg)
    else:
        extra["lfd_config"] = asdict(propagator.cfg)
    dataio.save_arrays(path, arrays, extra=extra)


def load_propagator(path: str | Path):
    arrays, manifest = dataio.load_arrays(path)
    if manifest.get("kind") != "propagator":
        raise dataio.DatasetFormatError(f"{path} is not a propagator checkpoint")
    if manifest["propagator"] == "lfd":
        prop = LeaderFollowerDynamics(LfdConfig(**manifest["lfd_config"]))
    else:
        prop = CausalPropagator(CausalConfig(**manifest["causal_config"]))
    state = {
        name.replace("__", "."): torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in arrays.items()
    }
    prop.load_state_dict(state)
    prop.eval()
    return prop


def grad_check(
    module: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    eps: float = 1e-5,
    denom_floor: float = 1e-4,
    max_params_per_tensor: int | None = None,
) -> float:
    """Max relative deviation between autograd and central finite differences.

    The module must be in double precision and ``loss_fn`` deterministic.
    ``max_params_per_tensor`` subsamples coordinates (seeded) for larger
    modules; the default checks every coordinate.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            g_flat = (torch.zeros_like(p) if g is None else g).reshape(-1)
            idx = np.arange(flat.numel())
            if max_params_per_tensor is not None and flat.numel() > max_params_per_tensor:
                idx = rng.choice(flat.numel(), size=max_params_per_tensor, replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                an = float(g_flat[i])
                rel = abs(fd - an) / max(abs(fd), abs(an), denom_floor)
                worst = max(worst, rel)
    return worst
