"""Orchestration tests: chamfer, sampling, config, CLI, training artifacts."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import logit

from splatlab.harness.chamfer import chamfer, sample_points
from splatlab.harness.config import RunConfig, load_config
from splatlab.harness.gradcheck import run_gradcheck
from splatlab.harness.train import Dataset, TrainAbort, generate_dataset, train
from splatlab.imgcore import read_pfm
from splatlab.splat import GaussianCloud, load_cloud


def _chamfer_bruteforce(p, q):
    d2 = np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=-1)
    return 0.5 * (np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean())


def _tiny_config(tmp_path, **over):
    cfg = RunConfig()
    cfg.scene_kind = "sphere"
    cfg.scene_gt_points = 600
    cfg.views_count = 4
    cfg.views_width = 24
    cfg.views_height = 24
    cfg.gaussians_count = 80
    cfg.train_iterations = 8
    cfg.train_chamfer_samples = 400
    cfg.output_dir = str(tmp_path / "run")
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg.validate()


class TestChamfer:
    def test_identical_sets(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal((100, 3))
        assert chamfer(p, p.copy()) == 0.0

    def test_single_pair(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 1.0

    def test_asymmetric_example(self):
        p = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        q = np.array([[1.0, 0, 0]])
        assert chamfer(p, q) == pytest.approx(1.0, abs=1e-15)

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            n = int(rng.integers(3, 300))
            m = int(rng.integers(3, 300))
            scale = float(rng.choice([0.01, 1.0, 50.0]))
            p = rng.standard_normal((n, 3)) * scale
            q = rng.standard_normal((m, 3)) * scale + rng.standard_normal(3)
            assert chamfer(p, q) == _chamfer_bruteforce(p, q)

    def test_degenerate_reference(self):
        p = np.tile([[1.0, 1.0, 1.0]], (5, 1))
        q = np.array([[4.0, 5.0, 1.0]])
        assert chamfer(p, q) == pytest.approx(5.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.ones((3, 3)))


class TestSamplePoints:
    def _cloud(self, n=10, opacity=0.9, scale=0.001):
        rng = np.random.default_rng(2)
        pos = rng.standard_normal((n, 3))
        ls = np.full((n, 3), np.log(scale))
        quat = np.tile([1.0, 0, 0, 0], (n, 1))
        op = np.full(n, float(logit(opacity)))
        cl = np.zeros((n, 3))
        return GaussianCloud(pos, ls, quat, op, cl), pos

    def test_within_one_sigma(self):
        cloud, pos = self._cloud(n=1, scale=0.01)
        pts = sample_points(cloud, 500, seed=0)
        d = np.linalg.norm(pts - pos[0], axis=1)
        assert np.all(d <= 0.01 * np.sqrt(3) + 1e-12)  # |u| <= 1 in Mahalanobis

    def test_no_opaque_rejected(self):
        cloud, _ = self._cloud(opacity=0.2)
        with pytest.raises(ValueError):
            sample_points(cloud, 10, seed=0)

    def test_deterministic(self):
        cloud, _ = self._cloud()
        a = sample_points(cloud, 64, seed=5)
        b = sample_points(cloud, 64, seed=5)
        np.testing.assert_array_equal(a, b)
        c = sample_points(cloud, 64, seed=6)
        assert not np.array_equal(a, c)

    def test_only_opaque_sampled(self):
        rng = np.random.default_rng(3)
        pos = np.array([[0.0, 0, 0], [100.0, 0, 0]])
        ls = np.full((2, 3), np.log(1e-4))
        quat = np.tile([1.0, 0, 0, 0], (2, 1))
        op = np.array([float(logit(0.9)), float(logit(0.1))])
        cloud = GaussianCloud(pos, ls, quat, op, np.zeros((2, 3)))
        pts = sample_points(cloud, 200, seed=1)
        assert np.all(np.linalg.norm(pts, axis=1) < 1.0)


class TestConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_load_with_overrides(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[scene]\nkind = plane\n[train]\niterations = 5\n")
        cfg = load_config(ini, ["views.width=32", "ablation.illum=false"])
        assert cfg.scene_kind == "plane"
        assert cfg.train_iterations == 5
        assert cfg.views_width == 32
        assert cfg.ablation_illum is False

    def test_unknown_key_rejected(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[scene]\nnope = 1\n")
        with pytest.raises(KeyError):
            load_config(ini)

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError):
            load_config(None, ["views.width=8"])

    def test_checked_in_default_config(self):
        cfg = load_config(os.path.join(os.path.dirname(__file__), "..",
                                       "configs", "default.ini"))
        assert cfg.train_iterations == 2000
        assert cfg.loss_w_normal == 0.15


class TestDataset:
    def test_generate_files(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        outdir = tmp_path / "ds"
        ds = generate_dataset(cfg, outdir)
        assert (outdir / "manifest.txt").exists()
        img = read_pfm(outdir / "view_000.pfm")
        assert img.width == 24
        # PFM files hold the perturbed training images, bit-exact in f32
        np.testing.assert_array_equal(
            img.data, ds.images[0].data.astype(np.float32).astype(np.float64))
        manifest = (outdir / "manifest.txt").read_text().splitlines()
        assert manifest[0].startswith("scene sphere")
        assert len([l for l in manifest if l.startswith("view ")]) == 4

    def test_dataset_deterministic(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        a = Dataset(cfg)
        b = Dataset(cfg)
        for x, y in zip(a.images, b.images):
            assert x.data.tobytes() == y.data.tobytes()
        np.testing.assert_array_equal(a.gt_points, b.gt_points)

    def test_ranks_invariant_to_monotone_perturbation(self, tmp_path):
        # brightness/contrast/gamma are monotone: rank maps survive them
        cfg = _tiny_config(tmp_path)
        ds = Dataset(cfg)
        cfg2 = _tiny_config(tmp_path, perturb_enabled=False)
        ds2 = Dataset(cfg2)
        for r1, r2 in zip(ds.ranks, ds2.ranks):
            assert abs(np.corrcoef(r1.ravel(), r2.ravel())[0, 1]) > 0.99


class TestTrain:
    def test_one_iteration_smoke(self, tmp_path):
        cfg = _tiny_config(tmp_path, train_iterations=1)
        report = train(cfg)
        assert report.final_chamfer >= 0.0
        assert report.iterations == 1
        out = tmp_path / "run"
        for name in ("report.json", "losses.csv", "checkpoint.gau",
                     "checkpoint.ill", "points.ply", "timing.json"):
            assert (out / name).exists()

    def test_report_fields(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        report = train(cfg)
        data = json.loads(report.to_json())
        assert set(data) >= {"final_chamfer", "gated_fraction", "iterations",
                             "config", "code_version", "loss_first", "loss_last"}
        assert "wall_clock_seconds" not in data  # deterministic document
        assert report.wall_clock_seconds > 0.0
        assert np.isfinite(report.final_chamfer)

    def test_baseline_has_no_illum_artifacts(self, tmp_path):
        cfg = _tiny_config(tmp_path, ablation_illum=False, ablation_normal=False)
        report = train(cfg)
        assert report.gated_fraction == 0.0
        assert not (tmp_path / "run" / "checkpoint.ill").exists()

    def test_loss_csv_matches_iterations(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        train(cfg)
        rows = (tmp_path / "run" / "losses.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + cfg.train_iterations

    def test_nan_abort(self, tmp_path, monkeypatch):
        cfg = _tiny_config(tmp_path)
        import splatlab.harness.train as trainmod

        def bad_fwd(*args, **kwargs):
            return float("nan"), np.zeros((24, 24)), {"a": None, "b": None,
                                                      "lam": 0.2,
                                                      "ssim_cache": None}
        monkeypatch.setattr(trainmod, "_photometric_fwd", bad_fwd)
        cfg.ablation_illum = False
        with pytest.raises(TrainAbort):
            train(cfg)
        assert (tmp_path / "run" / "diagnostics" / "abort.txt").exists()

    def test_snapshots_written(self, tmp_path):
        cfg = _tiny_config(tmp_path, train_snapshot_interval=4)
        train(cfg)
        assert (tmp_path / "run" / "render_000000.ppm").exists()
        assert (tmp_path / "run" / "render_000004.ppm").exists()


class TestGradcheckHarness:
    def test_all_pass(self):
        rows = run_gradcheck(seed=0)
        assert all(r.passed for r in rows)
        groups = {r.group for r in rows}
        assert {"gamma_params", "conv_weights", "illumination_field",
                "normal_loss", "gradient_loss", "splat_position",
                "splat_rotation", "mvs_depth"} <= groups

    def test_corruption_detected(self):
        rows = run_gradcheck(seed=0, corrupt_group="conv_weights")
        bad = [r for r in rows if r.group == "conv_weights"]
        assert bad and not bad[0].passed
        assert all(r.passed for r in rows if r.group != "conv_weights")


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "splatlab", *args],
                          capture_output=True, text=True, cwd=cwd)


class TestCli:
    def test_usage_error_exit_code(self, tmp_path):
        r = _cli(["definitely-not-a-command"], tmp_path)
        assert r.returncode == 1

    def test_missing_config_file(self, tmp_path):
        r = _cli(["train", "--config", "nope.ini"], tmp_path)
        assert r.returncode == 1

    def test_gen_train_eval_cycle(self, tmp_path):
        over = ["--set", "scene.gt_points=600", "--set", "views.count=4",
                "--set", "views.width=24", "--set", "views.height=24",
                "--set", "gaussians.count=80",
                "--set", "train.chamfer_samples=400"]
        r = _cli(["gen", "--out", "ds", *over], tmp_path)
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "ds" / "manifest.txt").exists()
        r = _cli(["train", "--iters", "2", "--out", "run", "--seed", "7", *over],
                 tmp_path)
        assert r.returncode == 0, r.stderr
        assert "final chamfer" in r.stdout
        r = _cli(["eval", "--checkpoint", "run/checkpoint.gau", "--samples",
                  "400", *over], tmp_path)
        assert r.returncode == 0, r.stderr
        assert "chamfer:" in r.stdout

    def test_eval_gt_points_against_themselves(self, tmp_path):
        # every splat at a surface point with negligible spread: chamfer ~ 0
        from splatlab.synth import SceneSpec, sample_gt_points
        from splatlab.splat import save_cloud
        scene = SceneSpec(kind="sphere", extent=1.0, seed=1)
        scene.n_gt_points = 600
        pts = sample_gt_points(scene)
        rng = np.random.default_rng(0)
        cloud = GaussianCloud.from_surface_points(
            pts, 600, jitter_sigma=0.0, init_scale=1e-4, init_opacity=0.9,
            init_color=np.array([0.5, 0.5, 0.5]), rng=rng)
        save_cloud(cloud, tmp_path / "gt.gau")
        r = _cli(["eval", "--checkpoint", "gt.gau", "--samples", "600",
                  "--set", "scene.gt_points=600"], tmp_path)
        assert r.returncode == 0, r.stderr
        value = float(r.stdout.split("chamfer:")[1])
        assert value < 5e-3

    def test_gradcheck_cli(self, tmp_path):
        r = _cli(["gradcheck", "--seed", "1"], tmp_path)
        assert r.returncode == 0, r.stderr
        assert "pass" in r.stdout
        r = _cli(["gradcheck", "--seed", "1", "--corrupt", "splat_color"], tmp_path)
        assert r.returncode == 1
        assert "FAIL" in r.stdout

    def test_ablate_emits_four_reports(self, tmp_path):
        over = ["--set", "scene.gt_points=400", "--set", "views.count=4",
                "--set", "views.width=24", "--set", "views.height=24",
                "--set", "gaussians.count=60",
                "--set", "train.chamfer_samples=300"]
        r = _cli(["ablate", "--iters", "2", "--out", "ab", "--seed", "3", *over],
                 tmp_path)
        assert r.returncode == 0, r.stderr
        for mode in ("baseline", "illum_only", "normal_only", "full"):
            assert (tmp_path / "ab" / mode / "report.json").exists()
        csv = (tmp_path / "ab" / "ablation.csv").read_text()
        assert csv.count("\n") == 5

    def test_bench_cli(self, tmp_path):
        r = _cli(["bench", "--gaussians", "60", "--size", "24",
                  "--repeats", "1"], tmp_path)
        assert r.returncode == 0, r.stderr
        assert "backend" in r.stdout
