"""Command-line entry points.

Subcommands: generate-fhn, generate-advection, generate-localized, train,
evaluate, forecast, bench, plot.  Each command takes an optional JSON config
plus flag overrides, writes machine-readable outputs (JSON/CSV/binary
manifests), and renders matplotlib figures next to them where applicable.

Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

OUTPUT_ROOT_ENV = "SPARSETWIN_OUTPUT_ROOT"


class ConfigError(Exception):
    """Invalid configuration; the message carries the offending field path."""


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top-level config must be an object")
    return cfg


def _take(cfg: dict, path: str, kind, default):
    """Fetch a (possibly nested) config field with type checking."""
    node = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.get(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: expected object at '{part}'")
    value = node.get(parts[-1], default)
    if value is None:
        return None
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _positive(value, path: str):
    if value is not None and value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    return value


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate_fhn(args) -> int:
    from .dataio import save_dataset
    from .simulate import FhnConfig, generate_fhn

    cfg = _load_json_config(args.config)
    fhn = FhnConfig(
        mu_u=_take(cfg, "mu_u", float, 1.0),
        mu_v=_take(cfg, "mu_v", float, 100.0),
        alpha_r=_take(cfg, "alpha_r", float, 0.01),
        beta_r=_take(cfg, "beta_r", float, 0.25),
        half_width=_positive(_take(cfg, "half_width", float, 50.0), "half_width"),
        n_grid=args.grid or _positive(_take(cfg, "n_grid", int, 64), "n_grid"),
        dt_sim=_positive(_take(cfg, "dt_sim", float, 0.02), "dt_sim"),
        n_steps=args.steps or _positive(_take(cfg, "n_steps", int, 4000), "n_steps"),
        save_every=_positive(_take(cfg, "save_every", int, 40), "save_every"),
        burn_in=_take(cfg, "burn_in", int, 1000),
        init_std=_positive(_take(cfg, "init_std", float, 0.05), "init_std"),
        seed=args.seed if args.seed is not None else _take(cfg, "seed", int, 0),
    )
    n_cases = args.cases or _positive(_take(cfg, "n_cases", int, 24), "n_cases")
    try:
        fhn.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = generate_fhn(fhn, n_cases, split_seed=_take(cfg, "split_seed", int, 0))
    out = save_dataset(ds, _resolve_out(args.out))
    print(f"wrote dataset: {out} ({ds.n_cases} cases x {ds.n_t} frames x {ds.n_p} points)")
    return EXIT_OK


def cmd_generate_advection(args) -> int:
    from .dataio import save_dataset
    from .simulate import generate_advection

    cfg = _load_json_config(args.config)
    speed = cfg.get("speed", [1.5, 0.7])
    if not (isinstance(speed, list) and len(speed) == 2):
        raise ConfigError("speed: expected [cx, cy]")
    ds = generate_advection(
        n_grid=args.grid or _positive(_take(cfg, "n_grid", int, 64), "n_grid"),
        n_cases=args.cases or _positive(_take(cfg, "n_cases", int, 8), "n_cases"),
        n_t=args.steps or _positive(_take(cfg, "n_t", int, 96), "n_t"),
        speed=(float(speed[0]), float(speed[1])),
        seed=args.seed if args.seed is not None else _take(cfg, "seed", int, 0),
        split_seed=_take(cfg, "split_seed", int, 0),
    )
    out = save_dataset(ds, _resolve_out(args.out))
    print(f"wrote dataset: {out} ({ds.n_cases} cases x {ds.n_t} frames x {ds.n_p} points)")
    return EXIT_OK


def cmd_generate_localized(args) -> int:
    from .dataio import save_dataset
    from .simulate import generate_localized

    cfg = _load_json_config(args.config)
    ds = generate_localized(
        n_grid=args.grid or _positive(_take(cfg, "n_grid", int, 64), "n_grid"),
        n_cases=args.cases or _positive(_take(cfg, "n_cases", int, 12), "n_cases"),
        n_t=args.steps or _positive(_take(cfg, "n_t", int, 64), "n_t"),
        seed=args.seed if args.seed is not None else _take(cfg, "seed", int, 0),
        split_seed=_take(cfg, "split_seed", int, 0),
    )
    out = save_dataset(ds, _resolve_out(args.out))
    print(f"wrote dataset: {out} ({ds.n_cases} cases x {ds.n_t} frames x {ds.n_p} points)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_config_from_dict(cfg: dict):
    from .encoder import EncoderConfig
    from .importance import ImportanceLossWeights
    from .model import VARIANTS, ModelConfig
    from .reconstructor import ReconstructorConfig
    from .training import SensorSpec, Stage1Config, Stage2Config, TrainConfig

    variant = _take(cfg, "model.variant", str, "full")
    if variant not in VARIANTS:
        raise ConfigError(f"model.variant: must be one of {VARIANTS}, got {variant!r}")
    encoder = EncoderConfig(
        n_dim=_take(cfg, "model.n_dim", int, 2),
        n_channels=_take(cfg, "model.n_channels", int, 2),
        latent_dim=_positive(_take(cfg, "model.latent_dim", int, 64), "model.latent_dim"),
        n_latents=_positive(_take(cfg, "model.n_latents", int, 16), "model.n_latents"),
        n_freq=_positive(_take(cfg, "model.n_freq", int, 32), "model.n_freq"),
        n_heads=_positive(_take(cfg, "model.n_heads", int, 1), "model.n_heads"),
        freq_std=_positive(_take(cfg, "model.freq_std", float, 1.0), "model.freq_std"),
    )
    recon = ReconstructorConfig(
        gamma=_take(cfg, "model.gamma", float, 1.0),
        top_k=_positive(_take(cfg, "model.top_k", int, 8), "model.top_k"),
        bandwidth=_positive(_take(cfg, "model.bandwidth", float, 0.05), "model.bandwidth"),
        fusion_hidden=_positive(_take(cfg, "model.fusion_hidden", int, 128), "model.fusion_hidden"),
    )
    model = ModelConfig(variant=variant, encoder=encoder, recon=recon)
    sensors = SensorSpec(
        count=_positive(_take(cfg, "train.sensors.count", int, 64), "train.sensors.count"),
        min_count=_take(cfg, "train.sensors.min_count", int, None),
        max_count=_take(cfg, "train.sensors.max_count", int, None),
        fixed=_take(cfg, "train.sensors.fixed", bool, False),
        fixed_seed=_take(cfg, "train.sensors.fixed_seed", int, None),
    )
    importance = ImportanceLossWeights(
        kl=_take(cfg, "train.importance.kl", float, 1e-3),
        entropy=_take(cfg, "train.importance.entropy", float, 1e-4),
        spatial_var=_take(cfg, "train.importance.spatial_var", float, 1e-3),
        mc_samples=_positive(_take(cfg, "train.importance.mc_samples", int, 4), "train.importance.mc_samples"),
    )
    stage1 = Stage1Config(
        steps=_positive(_take(cfg, "train.steps", int, 1200), "train.steps"),
        lr=_positive(_take(cfg, "train.lr", float, 2e-3), "train.lr"),
        batch_frames=_positive(_take(cfg, "train.batch_frames", int, 4), "train.batch_frames"),
        n_queries=_positive(_take(cfg, "train.n_queries", int, 512), "train.n_queries"),
        nll_weight=_take(cfg, "train.nll_weight", float, 0.05),
        sensors=sensors,
        importance=importance,
        seed=_take(cfg, "train.seed", int, 0),
    )
    stage2 = None
    if cfg.get("stage2"):
        propagator = _take(cfg, "stage2.propagator", str, "lfd")
        if propagator not in ("lfd", "causal"):
            raise ConfigError(f"stage2.propagator: must be 'lfd' or 'causal', got {propagator!r}")
        stage2 = Stage2Config(
            propagator=propagator,
            steps=_positive(_take(cfg, "stage2.steps", int, 400), "stage2.steps"),
            lr=_positive(_take(cfg, "stage2.lr", float, 1e-3), "stage2.lr"),
            batch_windows=_positive(_take(cfg, "stage2.batch_windows", int, 8), "stage2.batch_windows"),
            window=_positive(_take(cfg, "stage2.window", int, 16), "stage2.window"),
            sensor_count=_positive(_take(cfg, "stage2.sensor_count", int, 32), "stage2.sensor_count"),
            sensor_seed=_take(cfg, "stage2.sensor_seed", int, 0),
            latent_weight=_take(cfg, "stage2.latent_weight", float, 1.0),
            decode_weight=_take(cfg, "stage2.decode_weight", float, 0.0),
            seed=_take(cfg, "stage2.seed", int, 0),
        )
    return TrainConfig(
        model=model,
        stage1=stage1,
        stage2=stage2,
        reference_mode=_take(cfg, "reference_mode", bool, True),
    )


def cmd_train(args) -> int:
    from .dataio import load_dataset, save_arrays
    from .training import train

    cfg = _load_json_config(args.config)
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.variant is not None:
        cfg.setdefault("model", {})["variant"] = args.variant
    ds = load_dataset(args.dataset)
    cfg.setdefault("model", {}).setdefault("n_channels", ds.n_c)
    cfg.setdefault("model", {}).setdefault("n_dim", ds.n_d)
    train_cfg = train_config_from_dict(cfg)
    out = _resolve_out(args.out)
    report = train(train_cfg, ds, out)

    # persist an importance-field snapshot so plots never touch the model
    from .model import load_model
    import torch

    model = load_model(out / "checkpoints" / "stage1")
    with torch.no_grad():
        phi = model.phi_at(torch.from_numpy(ds.coords.astype(np.float32))).numpy()
    save_arrays(
        out / "phi_field",
        {"phi": phi.astype(np.float32), "coords": ds.coords.astype(np.float32)},
        extra={"kind": "phi_field", "n_grid": ds.provenance.get("n_grid") or ds.provenance.get("config", {}).get("n_grid")},
    )
    print(f"run complete: {out} (test rel L2 = {report['test_rel_l2']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / forecast
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    import torch

    from .dataio import load_dataset, save_arrays
    from .model import load_model
    from .training import evaluate_reconstruction

    ds = load_dataset(args.dataset)
    run = Path(args.run)
    model = load_model(run / "checkpoints" / "stage1")
    _, test_cases = ds.train_test_indices()
    sensor_counts = [int(s) for s in args.sensors.split(",")]
    seeds = [int(s) for s in args.sensor_seeds.split(",")]
    rows = []
    for n in sensor_counts:
        err = evaluate_reconstruction(
            model, ds, test_cases, n, sensor_seeds=seeds, frame_stride=args.frame_stride
        )
        rows.append(
            {
                "metric": "rel_l2",
                "dataset": str(args.dataset),
                "model": model.variant,
                "seed": seeds[0],
                "n_sensors": n,
                "value": err,
            }
        )
        print(f"n_sensors={n}: rel_l2={err:.4f}")
    out = _resolve_out(args.out) if args.out else run / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2))

    if args.dump_example:
        from .sensing import sample_sensors

        idx = sample_sensors(ds.n_p, sensor_counts[0], seeds[0])
        coords = torch.from_numpy(ds.coords.astype(np.float32))
        case, t = int(test_cases[0]), ds.n_t // 2
        u = torch.from_numpy(ds.fields[case, t, idx])
        with torch.no_grad():
            recon = model(coords[idx], u, coords)
        save_arrays(
            out.parent / "reconstruction_dump",
            {
                "mean": recon.mean.numpy().astype(np.float32),
                "log_var": recon.log_var.numpy().astype(np.float32),
                "neighbors": recon.neighbors.numpy().astype(np.int64),
                "weights": recon.weights.numpy().astype(np.float32),
                "truth": ds.fields[case, t].astype(np.float32),
                "sensor_indices": idx.astype(np.int64),
            },
            extra={"kind": "reconstruction_dump", "case": case, "t": t,
                   "n_grid": ds.provenance.get("n_grid") or ds.provenance.get("config", {}).get("n_grid")},
        )
    print(f"metrics written: {out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    from .dataio import load_dataset, save_arrays
    from .model import load_model
    from .training import forecast_rollout, load_propagator, rollout_errors

    ds = load_dataset(args.dataset)
    run = Path(args.run)
    model = load_model(run / "checkpoints" / "stage1")
    prop_path = run / "checkpoints" / "stage2"
    if not (prop_path / "manifest.json").exists():
        raise FileNotFoundError(f"{prop_path}: no trained propagator in this run")
    propagator = load_propagator(prop_path)
    sensors_file = run / "stage2_sensors.json"
    if sensors_file.exists():
        sensor_idx = np.asarray(json.loads(sensors_file.read_text()), dtype=np.int64)
    else:
        from .sensing import sample_sensors

        sensor_idx = sample_sensors(ds.n_p, args.n_sensors, args.sensor_seed)
    _, test_cases = ds.train_test_indices()
    case = args.case if args.case is not None else int(test_cases[0])
    traj, decoded = forecast_rollout(
        model, propagator, ds, case, args.t0, sensor_idx, n_obs=args.n_obs, horizon=args.horizon
    )
    truth = ds.fields[case, args.t0 + args.n_obs : args.t0 + args.n_obs + args.horizon]
    errs = rollout_errors(decoded, truth)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_arrays(
        out / "trajectory",
        {
            "leaders": traj.leaders.astype(np.float32),
            "norms": traj.norms.astype(np.float32),
            "phi": traj.phi.astype(np.float32),
        },
        extra={"kind": "latent_trajectory", "n_obs": args.n_obs,
               "divergence_step": traj.divergence_step},
    )
    with (out / "errors.csv").open("w") as fh:
        fh.write("step,rel_l2\n")
        for i, e in enumerate(errs):
            fh.write(f"{i + 1},{e}\n")
    summary = {
        "case": case,
        "t0": args.t0,
        "n_obs": args.n_obs,
        "horizon": args.horizon,
        "divergence_step": traj.divergence_step,
        "mean_rel_l2": float(np.mean(errs)) if len(errs) else None,
        "final_rel_l2": float(errs[-1]) if len(errs) else None,
        "max_latent_norm": float(traj.norms.max()),
    }
    (out / "forecast.json").write_text(json.dumps(summary, indent=2))
    print(f"forecast written: {out} (mean rel L2 = {summary['mean_rel_l2']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / plot
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from .bench import standard_sweep, write_sweep
    from .plotting import plot_cost_scaling

    cfg = _load_json_config(args.config)
    sensor_counts = cfg.get("sensor_counts", [256, 512, 1024, 2048, 4096])
    query_counts = cfg.get("query_counts", [1024, 4096, 16384, 65536])
    sweep = standard_sweep(
        sensor_counts=sensor_counts,
        query_counts=query_counts,
        n_latents=_take(cfg, "n_latents", int, 16),
        latent_dim=_take(cfg, "latent_dim", int, 64),
        window=_take(cfg, "window", int, 16),
        top_k_values=tuple(cfg.get("top_k_values", [8, 16, 32])),
    )
    out = _resolve_out(args.out)
    write_sweep(out, sweep)
    for name in sweep["tables"]:
        x_key = "n_queries" if name.startswith("decode") else "n_sensors"
        y_key = "peak_live_elements" if name.startswith("decode") else "score_elements"
        plot_cost_scaling(out / f"cost_{name}.csv", out / f"fig_{name}.png", x_key, y_key)
    fits = sweep["fits"]
    print(f"bench written: {out}")
    print(f"  encoder slope vs N: {fits['encoder_vs_n']['slope']:.3f}")
    print(f"  causal slope vs N:  {fits['causal_vs_n']['slope']:.3f}")
    print(f"  lfd affine R^2:     {fits['lfd_vs_n']['r2']:.6f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .dataio import load_arrays
    from .metrics import to_grid
    from .plotting import (
        plot_error_vs_sensors,
        plot_field_comparison,
        plot_importance_map,
        plot_latent_pca,
        plot_loss_history,
        plot_rollout_error,
    )

    target = Path(args.target)
    if not target.exists():
        raise FileNotFoundError(f"{target} does not exist")
    out = _resolve_out(args.out) if args.out else target / "figures"
    produced = []

    losses = target / "losses_stage1.csv"
    if losses.exists():
        produced.append(plot_loss_history(losses, out / "loss_stage1.png"))
    losses2 = target / "losses_stage2.csv"
    if losses2.exists():
        produced.append(plot_loss_history(losses2, out / "loss_stage2.png"))

    phi_dir = target / "phi_field"
    if (phi_dir / "manifest.json").exists():
        arrays, manifest = load_arrays(phi_dir)
        n_grid = manifest.get("n_grid")
        if n_grid:
            produced.append(
                plot_importance_map(to_grid(arrays["phi"], int(n_grid)), out / "importance_map.png")
            )

    metrics_file = target / "metrics.json"
    if metrics_file.exists():
        rows = json.loads(metrics_file.read_text())
        if rows and "n_sensors" in rows[0]:
            produced.append(plot_error_vs_sensors(rows, out / "error_vs_sensors.png"))

    dump_dir = target / "reconstruction_dump"
    if (dump_dir / "manifest.json").exists():
        arrays, manifest = load_arrays(dump_dir)
        n_grid = manifest.get("n_grid")
        if n_grid:
            produced.append(
                plot_field_comparison(
                    to_grid(arrays["truth"][:, 0], int(n_grid)),
                    to_grid(arrays["mean"][:, 0], int(n_grid)),
                    out / "reconstruction_example.png",
                )
            )

    errors_csv = target / "errors.csv"
    if errors_csv.exists():
        errs = np.loadtxt(errors_csv, delimiter=",", skiprows=1, ndmin=2)
        produced.append(plot_rollout_error({"forecast": errs[:, 1]}, out / "rollout_error.png"))

    traj_dir = target / "trajectory"
    if (traj_dir / "manifest.json").exists():
        arrays, manifest = load_arrays(traj_dir)
        produced.append(
            plot_latent_pca(arrays["leaders"], out / "latent_pca.png", n_obs=manifest.get("n_obs"))
        )

    if not produced:
        raise FileNotFoundError(f"{target}: no plottable artifacts found")
    for p in produced:
        print(f"figure written: {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsetwin",
        description="Sparse-field reconstruction and latent forecasting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in [
        ("generate-fhn", cmd_generate_fhn),
        ("generate-advection", cmd_generate_advection),
        ("generate-localized", cmd_generate_localized),
    ]:
        p = sub.add_parser(name, help=f"{name.split('-')[1]} dataset generation")
        p.add_argument("--out", required=True, help="dataset output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--cases", type=int, default=None)
        p.add_argument("--grid", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("train", help="train a model (stage 1, optionally stage 2)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=["full", "uniform", "global"], default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="reconstruction metrics for a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sensors", default="64", help="comma-separated sensor counts")
    p.add_argument("--sensor-seeds", default="0", help="comma-separated sensor draws")
    p.add_argument("--frame-stride", type=int, default=4)
    p.add_argument("--out", default=None)
    p.add_argument("--dump-example", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("forecast", help="latent rollout from a sparse window")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--case", type=int, default=None)
    p.add_argument("--t0", type=int, default=0)
    p.add_argument("--n-obs", type=int, default=16)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--n-sensors", type=int, default=32)
    p.add_argument("--sensor-seed", type=int, default=0)
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("bench", help="counted-work scaling sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("plot", help="regenerate figures from persisted outputs")
    p.add_argument("target", help="run/eval/forecast/bench directory")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors, which matches ours
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
