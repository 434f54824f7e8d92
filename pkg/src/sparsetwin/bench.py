"""Deterministic cost accounting for the scaling studies.

GPU peak memory is hardware-dependent and out of scope at desk scale; the
declared proxies are counted attention-score elements, multiply-accumulate
estimates, and analytic live-array accounting.  All counts are exact
closed-form functions of the configuration, and the instrumented forward
passes (see opcount) must reproduce them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_QUERY_CHUNK = 2048


@dataclass
class CostReport:
    config: dict
    score_elements: int
    macs: int
    peak_live_elements: int
    breakdown: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = dict(self.config)
        out.update(
            score_elements=self.score_elements,
            macs=self.macs,
            peak_live_elements=self.peak_live_elements,
        )
        out.update(self.breakdown)
        return out


def count_encoder_cost(
    n_sensors: int,
    n_latents: int,
    latent_dim: int,
    n_freq: int = 32,
    n_channels: int = 1,
    n_heads: int = 1,
) -> CostReport:
    """Score elements for the two cross-attention stages: exactly 2*N*S per head."""
    if min(n_sensors, n_latents, latent_dim) < 1:
        raise ValueError("sizes must be positive")
    n, s, d = n_sensors, n_latents, latent_dim
    scores = 2 * n * s * n_heads
    embed_macs = n * (2 * n_freq * d + n_channels * d)
    proj_macs = 2 * (n + s) * d * d * 4  # q/k/v/out projections, both stages
    attn_macs = 2 * scores * d  # QK^T and attn@V
    return CostReport(
        config={"kind": "encoder", "n_sensors": n, "n_latents": s, "latent_dim": d},
        score_elements=scores,
        macs=embed_macs + proj_macs + attn_macs,
        peak_live_elements=scores + (n + s) * d * 4,
        breakdown={"embed_macs": embed_macs, "attn_macs": attn_macs},
    )


def count_decode_cost(
    n_queries: int,
    top_k: int,
    n_sensors: int,
    latent_dim: int,
    n_channels: int = 1,
    fusion_hidden: int = 128,
    chunk: int = DEFAULT_QUERY_CHUNK,
) -> CostReport:
    """Per-query costs of selection + aggregation + fusion, with chunked decode.

    The live-array accounting mirrors the decode implementation exactly:
    outputs (mean, log-variance, neighbor ids, weights) are preallocated over
    all queries, while the per-chunk workspace holds the distance matrix, the
    stable sort output, the gathered/projected neighbor tokens, and the fusion
    activations.  The n_q-proportional part therefore scales with n_q * K and
    the sensor count enters only through the bounded chunk workspace.
    """
    if top_k > n_sensors:
        raise ValueError("top_k must not exceed n_sensors")
    nq, k, n, d, h, nc = n_queries, top_k, n_sensors, latent_dim, fusion_hidden, n_channels
    c = min(chunk, nq)
    distance_elements = nq * n
    selection_scores = nq * k  # softmax logits over each selected set
    aggregation_macs = nq * k * (d * d + 2 * d)
    fusion_macs = nq * (2 * d * h + h * h + 2 * h * nc)
    outputs = nq * (2 * nc + 2 * k)
    chunk_ws = c * (4 * n + 4 * k + 2 * k * d + 4 * d + 2 * h + 2 * nc)
    return CostReport(
        config={
            "kind": "decode",
            "n_queries": nq,
            "top_k": k,
            "n_sensors": n,
            "latent_dim": d,
            "chunk": c,
        },
        score_elements=selection_scores,
        macs=aggregation_macs + fusion_macs,
        peak_live_elements=outputs + chunk_ws,
        breakdown={
            "distance_elements": distance_elements,
            "aggregation_macs": aggregation_macs,
            "fusion_macs": fusion_macs,
            "output_elements": outputs,
            "chunk_workspace": chunk_ws,
        },
    )


def count_dynamics_cost(
    n_sensors: int,
    window: int,
    latent_dim: int,
    variant: str = "lfd",
    n_heads: int = 1,
    ff_hidden: int | None = None,
) -> CostReport:
    """Per-step attention work of the two propagators.

    The hierarchical propagator runs leader self-attention over the window
    (w^2) plus two leader<->follower cross-attentions (N*w each): affine in N.
    The dense causal baseline attends over all flattened frame tokens:
    ((N+1)*w)^2, quadratic in N.
    """
    n, w, d = n_sensors, window, latent_dim
    h = ff_hidden if ff_hidden is not None else 2 * d
    if variant == "lfd":
        scores = (w * w + 2 * n * w) * n_heads
        proj_macs = (4 * w + 4 * (w + n) + 4 * n) * d * d
        ff_macs = (1 + n) * 2 * d * h
    elif variant == "causal":
        tokens = (n + 1) * w
        scores = tokens * tokens * n_heads
        proj_macs = 4 * tokens * d * d
        ff_macs = tokens * 2 * d * h
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return CostReport(
        config={
            "kind": f"dynamics-{variant}",
            "n_sensors": n,
            "window": w,
            "latent_dim": d,
        },
        score_elements=scores,
        macs=proj_macs + ff_macs + 2 * scores * d,
        peak_live_elements=scores + (n + 1) * w * d,
        breakdown={},
    )


def fit_loglog(xs, ys) -> dict:
    """Least-squares slope of log(y) vs log(x) with a 95% CI and R^2."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 3:
        raise ValueError("need at least 3 points for a slope fit")
    lx, ly = np.log(xs), np.log(ys)
    (slope, intercept), cov = np.polyfit(lx, ly, 1, cov=True)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    stderr = float(np.sqrt(max(cov[0, 0], 0.0)))
    return {
        "slope": float(slope),
        "intercept": float(intercept),
        "stderr": stderr,
        "ci95": 1.96 * stderr,
        "r2": r2,
    }


def fit_affine(xs, ys) -> dict:
    """Least-squares fit of y = a + b*x with R^2."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    b, a = np.polyfit(xs, ys, 1)
    pred = a + b * xs
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(b), "intercept": float(a), "r2": r2}


def standard_sweep(
    sensor_counts=(256, 512, 1024, 2048, 4096),
    query_counts=(1024, 4096, 16384, 65536),
    n_latents: int = 16,
    latent_dim: int = 64,
    window: int = 16,
    top_k_values=(8, 16, 32),
    decode_sensors: int = 256,
) -> dict:
    """Counted-work tables plus fitted scaling exponents for all components."""
    tables: dict[str, list[CostReport]] = {
        "encoder": [count_encoder_cost(n, n_latents, latent_dim) for n in sensor_counts],
        "lfd": [count_dynamics_cost(n, window, latent_dim, "lfd") for n in sensor_counts],
        "causal": [count_dynamics_cost(n, window, latent_dim, "causal") for n in sensor_counts],
    }
    for k in top_k_values:
        tables[f"decode_k{k}"] = [
            count_decode_cost(nq, k, decode_sensors, latent_dim) for nq in query_counts
        ]
    fits = {
        "encoder_vs_n": fit_loglog(sensor_counts, [r.score_elements for r in tables["encoder"]]),
        "lfd_vs_n": fit_affine(sensor_counts, [r.score_elements for r in tables["lfd"]]),
        "lfd_vs_n_loglog": fit_loglog(sensor_counts, [r.score_elements for r in tables["lfd"]]),
        "causal_vs_n": fit_loglog(sensor_counts, [r.score_elements for r in tables["causal"]]),
    }
    for k in top_k_values:
        fits[f"decode_k{k}_vs_nq"] = fit_loglog(
            query_counts, [r.peak_live_elements for r in tables[f"decode_k{k}"]]
        )
    return {"tables": tables, "fits": fits}


def write_cost_csv(path: str | Path, reports: list[CostReport]) -> Path:
    path = Path(path)
    rows = [r.row() for r in reports]
    keys: list[str] = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_sweep(out_dir: str | Path, sweep: dict) -> Path:
    """Persist a sweep as per-table CSVs plus a slope-summary JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, reports in sweep["tables"].items():
        write_cost_csv(out_dir / f"cost_{name}.csv", reports)
    (out_dir / "scaling_fits.json").write_text(json.dumps(sweep["fits"], indent=2, sort_keys=True))
    return out_dir
