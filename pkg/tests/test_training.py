import json

import numpy as np
import pytest
import torch

from sparsetwin.dataio import load_arrays
from sparsetwin.importance import ImportanceLossWeights
from sparsetwin.model import FieldModel, load_model
from sparsetwin.training import (
    SensorSpec,
    Stage1Config,
    Stage2Config,
    TrainConfig,
    TrainingDivergence,
    _check_finite,
    encode_trajectories,
    evaluate_reconstruction,
    loss_stage1,
    loss_stage2,
    make_propagator,
    train,
    train_stage1,
    train_stage2,
)

from conftest import small_model_config


def _stage1_cfg(**kw) -> Stage1Config:
    base = dict(steps=kw.pop("steps", 30), batch_frames=2, n_queries=48, sensors=SensorSpec(count=12))
    base.update(kw)
    return Stage1Config(**base)


class TestLossStage1:
    def test_all_zero_composition(self, small_model, tiny_dataset):
        # force perfect prediction, constant predicted variance, prior posterior
        with torch.no_grad():
            small_model.importance.head.weight.zero_()
            small_model.importance.head.bias.zero_()
            small_model.reconstructor.logvar_head.weight.zero_()
            small_model.reconstructor.logvar_head.bias.zero_()
        cfg = _stage1_cfg(
            nll_weight=0.0,
            importance=ImportanceLossWeights(kl=1e-3, entropy=0.0, spatial_var=0.0),
        )
        coords = torch.from_numpy(tiny_dataset.coords)
        x = coords[:10]
        u = torch.from_numpy(tiny_dataset.fields[0, 0, :10])
        q = coords[20:40]
        with torch.no_grad():
            out = small_model(x, u, q)
        total, comps = loss_stage1(small_model, x, u, q, out.mean.detach(), cfg, mc_seed=0)
        assert float(total.detach()) == pytest.approx(0.0, abs=1e-8)
        assert comps["mse"] == pytest.approx(0.0, abs=1e-12)

    def test_component_sum_matches_total(self, small_model, tiny_dataset):
        # double precision so the bookkeeping identity is exact to 1e-10
        model = small_model.double()
        cfg = _stage1_cfg(nll_weight=0.07)
        coords = torch.from_numpy(tiny_dataset.coords).double()
        x = coords[:10]
        u = torch.from_numpy(tiny_dataset.fields[0, 1, :10]).double()
        q = coords[30:60]
        qu = torch.from_numpy(tiny_dataset.fields[0, 1, 30:60]).double()
        total, comps = loss_stage1(model, x, u, q, qu, cfg, mc_seed=1)
        recomposed = comps["mse"] + cfg.nll_weight * comps["nll"] + comps["importance"]
        assert float(total.detach()) == pytest.approx(recomposed, abs=1e-10)

    def test_divergence_detection(self):
        with pytest.raises(TrainingDivergence) as err:
            _check_finite(torch.tensor(float("nan")), {"mse": float("nan"), "nll": 0.1})
        assert "mse" in str(err.value)
        with pytest.raises(TrainingDivergence):
            _check_finite(torch.tensor(1e9), {"mse": 1e9})


class TestTrainStage1:
    def test_loss_decreases_on_toy(self, tiny_dataset):
        torch.manual_seed(0)
        model = FieldModel(small_model_config())
        history = train_stage1(model, tiny_dataset, _stage1_cfg(steps=50, seed=3))
        first = np.mean([h["total"] for h in history[:5]])
        last = np.mean([h["total"] for h in history[-5:]])
        assert last < first

    def test_variable_sensor_counts(self, tiny_dataset):
        torch.manual_seed(0)
        model = FieldModel(small_model_config())
        cfg = _stage1_cfg(steps=10, sensors=SensorSpec(count=12, min_count=4, max_count=32))
        history = train_stage1(model, tiny_dataset, cfg)
        counts = {h["n_sensors"] for h in history}
        assert len(counts) > 1
        assert min(counts) >= 4 and max(counts) <= 32

    def test_evaluate_returns_scalar(self, tiny_dataset):
        model = FieldModel(small_model_config())
        err = evaluate_reconstruction(model, tiny_dataset, [3], 8, frame_stride=3)
        assert np.isfinite(err) and err > 0


class TestStage2:
    def _latents(self, model, ds, cases=(0, 1)):
        idx = np.sort(np.random.default_rng(0).choice(ds.n_p, size=10, replace=False))
        return encode_trajectories(model, ds, np.asarray(cases), idx)

    def test_constant_trajectory_recoverable(self, tiny_dataset):
        torch.manual_seed(1)
        model = FieldModel(small_model_config())
        leaders, followers, phi = self._latents(model, tiny_dataset)
        leaders = leaders[:, :1].expand(-1, 6, -1).contiguous()
        followers = followers[:, :1].expand(-1, 6, -1, -1).contiguous()
        cfg = Stage2Config(steps=200, window=3, batch_windows=4, lr=2e-3, seed=0)
        prop = make_propagator(cfg, latent_dim=16)
        history = train_stage2(prop, leaders, followers, phi, cfg)
        assert history[-1]["total"] < 1e-5

    def test_pure_latent_regression_when_decode_weight_zero(self, tiny_dataset):
        model = FieldModel(small_model_config())
        leaders, followers, phi = self._latents(model, tiny_dataset)
        cfg = Stage2Config(steps=1, window=3, decode_weight=0.0, seed=0)
        prop = make_propagator(cfg, latent_dim=16)
        total, comps = loss_stage2(
            prop,
            leaders[:, :3],
            followers[:, :3],
            leaders[:, 3],
            followers[:, 3],
            phi,
            cfg,
        )
        assert set(comps) == {"latent_mse", "total"}

    def test_stage2_never_touches_stage1(self, tiny_dataset):
        torch.manual_seed(2)
        model = FieldModel(small_model_config())
        before = {k: v.clone() for k, v in model.state_dict().items()}
        leaders, followers, phi = self._latents(model, tiny_dataset)
        cfg = Stage2Config(steps=20, window=3, seed=0)
        prop = make_propagator(cfg, latent_dim=16)
        train_stage2(prop, leaders, followers, phi, cfg)
        after = model.state_dict()
        for key, tensor in before.items():
            assert torch.equal(tensor, after[key]), key

    def test_causal_propagator_trains(self, tiny_dataset):
        model = FieldModel(small_model_config())
        leaders, followers, phi = self._latents(model, tiny_dataset)
        cfg = Stage2Config(steps=10, window=3, propagator="causal", seed=0)
        prop = make_propagator(cfg, latent_dim=16)
        history = train_stage2(prop, leaders, followers, phi, cfg)
        assert np.isfinite(history[-1]["total"])


class TestFullPipeline:
    def _config(self, steps=8, stage2=False):
        return TrainConfig(
            model=small_model_config(),
            stage1=_stage1_cfg(steps=steps, seed=5),
            stage2=Stage2Config(steps=5, window=3, sensor_count=8, seed=5) if stage2 else None,
            reference_mode=True,
        )

    def test_deterministic_checkpoints(self, tiny_dataset, tmp_path):
        r1 = train(self._config(), tiny_dataset, tmp_path / "a")
        r2 = train(self._config(), tiny_dataset, tmp_path / "b")
        a, _ = load_arrays(tmp_path / "a" / "checkpoints" / "stage1")
        b, _ = load_arrays(tmp_path / "b" / "checkpoints" / "stage1")
        for key in a:
            assert np.array_equal(a[key], b[key]), key
        assert r1["test_rel_l2"] == r2["test_rel_l2"]

    def test_run_report_records_documented_defaults(self, tiny_dataset, tmp_path):
        train(self._config(stage2=True), tiny_dataset, tmp_path / "run")
        config = json.loads((tmp_path / "run" / "config.json").read_text())
        assert config["model"]["recon"]["gamma"] == 1.0
        assert config["model"]["recon"]["eps"] == 1e-6
        assert config["model"]["recon"]["bandwidth"] == 0.05
        assert config["model"]["encoder"]["n_latents"] == 4
        assert config["model"]["encoder"]["latent_dim"] == 16
        assert config["stage1"]["importance"]["kl"] == 1e-3
        assert config["stage1"]["importance"]["entropy"] == 1e-4
        assert config["stage1"]["importance"]["spatial_var"] == 1e-3
        assert config["stage2"]["window"] == 3
        assert (tmp_path / "run" / "losses_stage1.csv").exists()
        assert (tmp_path / "run" / "report.json").exists()

    def test_checkpoint_round_trip(self, tiny_dataset, tmp_path):
        train(self._config(), tiny_dataset, tmp_path / "run")
        model = load_model(tmp_path / "run" / "checkpoints" / "stage1")
        coords = torch.from_numpy(tiny_dataset.coords)
        out = model(coords[:6], torch.from_numpy(tiny_dataset.fields[0, 0, :6]), coords[:20])
        assert torch.isfinite(out.mean).all()

    def test_stage2_artifacts(self, tiny_dataset, tmp_path):
        from sparsetwin.training import load_propagator

        train(self._config(stage2=True), tiny_dataset, tmp_path / "run")
        prop = load_propagator(tmp_path / "run" / "checkpoints" / "stage2")
        assert prop.cfg.window == 3
        sensors = json.loads((tmp_path / "run" / "stage2_sensors.json").read_text())
        assert len(sensors) == 8
