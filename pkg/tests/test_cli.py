import json
from pathlib import Path

import numpy as np
import pytest

from sparsetwin.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train (with stage 2) -> shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    ds_dir = root / "dataset"
    run_dir = root / "run"
    assert (
        main(
            [
                "generate-advection",
                "--out",
                str(ds_dir),
                "--cases",
                "4",
                "--grid",
                "16",
                "--steps",
                "24",
                "--seed",
                "0",
            ]
        )
        == EXIT_OK
    )
    config = {
        "model": {"latent_dim": 16, "n_latents": 4, "n_freq": 8, "top_k": 4, "fusion_hidden": 32},
        "train": {"steps": 12, "batch_frames": 2, "n_queries": 64, "sensors": {"count": 12}},
        "stage2": {"steps": 8, "window": 4, "sensor_count": 8},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    assert (
        main(
            [
                "train",
                "--dataset",
                str(ds_dir),
                "--out",
                str(run_dir),
                "--config",
                str(cfg_path),
            ]
        )
        == EXIT_OK
    )
    return {"root": root, "dataset": ds_dir, "run": run_dir, "config": cfg_path}


class TestGenerate:
    def test_dataset_layout(self, pipeline):
        ds = pipeline["dataset"]
        assert (ds / "manifest.json").exists()
        assert (ds / "fields.f32").exists()
        assert (ds / "coords.f32").exists()

    def test_invalid_config_field_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_cases": "many"}))
        code = main(["generate-fhn", "--out", str(tmp_path / "x"), "--config", str(bad)])
        assert code == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        code = main(
            ["generate-fhn", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "no.json")]
        )
        assert code == EXIT_MISSING


class TestTrain:
    def test_run_artifacts(self, pipeline):
        run = pipeline["run"]
        assert (run / "config.json").exists()
        assert (run / "losses_stage1.csv").exists()
        assert (run / "checkpoints" / "stage1" / "manifest.json").exists()
        assert (run / "checkpoints" / "stage2" / "manifest.json").exists()
        assert (run / "phi_field" / "manifest.json").exists()
        report = json.loads((run / "report.json").read_text())
        assert "test_rel_l2" in report

    def test_missing_dataset_exit_code(self, tmp_path):
        code = main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "r")])
        assert code == EXIT_MISSING

    def test_bad_variant_flag_rejected_by_parser(self, pipeline, tmp_path):
        code = main(
            [
                "train",
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(tmp_path / "r"),
                "--variant",
                "banana",
            ]
        )
        assert code == EXIT_CONFIG

    def test_bad_config_value(self, pipeline, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"steps": -5}}))
        code = main(
            [
                "train",
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(tmp_path / "r"),
                "--config",
                str(cfg),
            ]
        )
        assert code == EXIT_CONFIG


class TestEvaluate:
    def test_metrics_written_and_deterministic(self, pipeline, tmp_path):
        out1 = tmp_path / "m1.json"
        out2 = tmp_path / "m2.json"
        for out in (out1, out2):
            code = main(
                [
                    "evaluate",
                    "--run",
                    str(pipeline["run"]),
                    "--dataset",
                    str(pipeline["dataset"]),
                    "--sensors",
                    "8,12",
                    "--frame-stride",
                    "6",
                    "--out",
                    str(out),
                ]
            )
            assert code == EXIT_OK
        assert out1.read_text() == out2.read_text()
        rows = json.loads(out1.read_text())
        assert {r["n_sensors"] for r in rows} == {8, 12}
        assert all(np.isfinite(r["value"]) for r in rows)

    def test_dump_example(self, pipeline, tmp_path):
        out = tmp_path / "metrics.json"
        code = main(
            [
                "evaluate",
                "--run",
                str(pipeline["run"]),
                "--dataset",
                str(pipeline["dataset"]),
                "--sensors",
                "8",
                "--frame-stride",
                "8",
                "--out",
                str(out),
                "--dump-example",
            ]
        )
        assert code == EXIT_OK
        dump = tmp_path / "reconstruction_dump"
        assert (dump / "manifest.json").exists()
        from sparsetwin.dataio import load_arrays

        arrays, manifest = load_arrays(dump)
        assert set(arrays) >= {"mean", "log_var", "neighbors", "weights", "truth"}


class TestForecast:
    def test_forecast_outputs(self, pipeline, tmp_path):
        out = tmp_path / "fc"
        code = main(
            [
                "forecast",
                "--run",
                str(pipeline["run"]),
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(out),
                "--t0",
                "0",
                "--n-obs",
                "4",
                "--horizon",
                "8",
            ]
        )
        assert code == EXIT_OK
        summary = json.loads((out / "forecast.json").read_text())
        assert summary["horizon"] == 8
        assert (out / "errors.csv").exists()
        assert (out / "trajectory" / "manifest.json").exists()

    def test_run_without_stage2(self, pipeline, tmp_path):
        # train a stage-1-only run, forecasting must report a missing artifact
        run2 = tmp_path / "run2"
        cfg = tmp_path / "c.json"
        cfg.write_text(
            json.dumps(
                {
                    "model": {"latent_dim": 16, "n_latents": 4, "n_freq": 8, "top_k": 4},
                    "train": {"steps": 4, "batch_frames": 2, "n_queries": 32, "sensors": {"count": 8}},
                }
            )
        )
        assert (
            main(
                [
                    "train",
                    "--dataset",
                    str(pipeline["dataset"]),
                    "--out",
                    str(run2),
                    "--config",
                    str(cfg),
                ]
            )
            == EXIT_OK
        )
        code = main(
            [
                "forecast",
                "--run",
                str(run2),
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(tmp_path / "fc2"),
            ]
        )
        assert code == EXIT_MISSING


class TestBenchAndPlot:
    def test_bench_outputs(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["bench", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "cost_encoder.csv").exists()
        assert (out / "scaling_fits.json").exists()
        fits = json.loads((out / "scaling_fits.json").read_text())
        assert abs(fits["encoder_vs_n"]["slope"] - 1.0) < 0.01
        assert (out / "fig_encoder.png").exists()

    def test_plot_run(self, pipeline):
        code = main(["plot", str(pipeline["run"])])
        assert code == EXIT_OK
        figures = pipeline["run"] / "figures"
        assert (figures / "loss_stage1.png").exists()
        assert (figures / "importance_map.png").exists()

    def test_plot_forecast_dir(self, pipeline, tmp_path):
        out = tmp_path / "fc"
        main(
            [
                "forecast",
                "--run",
                str(pipeline["run"]),
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(out),
                "--n-obs",
                "4",
                "--horizon",
                "6",
            ]
        )
        code = main(["plot", str(out)])
        assert code == EXIT_OK
        assert (out / "figures" / "rollout_error.png").exists()
        assert (out / "figures" / "latent_pca.png").exists()

    def test_plot_empty_dir(self, tmp_path):
        code = main(["plot", str(tmp_path)])
        assert code == EXIT_MISSING

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPARSETWIN_OUTPUT_ROOT", str(tmp_path))
        code = main(["bench", "--out", "bench_rel"])
        assert code == EXIT_OK
        assert (tmp_path / "bench_rel" / "cost_encoder.csv").exists()
