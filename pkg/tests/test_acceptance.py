"""Release gate: every criterion below runs at its stated tolerance and
prints one PASS line when it holds.  Training-based criteria drive the real
CLI in a subprocess (single-threaded, seeded), exactly as a user would.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from platewarp import configio, data, losses, network
from platewarp import geometry as geo
from platewarp.edges import SOBEL_GX, SOBEL_GY
from conftest import random_convex_quad, raster_qiou

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

OVERFIT_MODEL_SEED = 2
COMPARISON_MODEL_SEED = 1
OVERFIT_SYNTH_SEED = 100
TRAIN_SYNTH_SEED = 0
TEST_SYNTH_SEED = 10_000


def run_cli(args):
    proc = subprocess.run(
        [sys.executable, "-m", "platewarp", *[str(a) for a in args]],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, f"CLI failed: {proc.stderr}\n{proc.stdout}"
    return proc


def desk_config(variant="edge_augmented"):
    """Desk-scale training setup: 64 px inputs and alpha set per the stated
    recipe (mean plate dimension / stride) for the synthetic plate sizes."""
    cfg = configio.RunConfig.default()
    cfg.network = replace(
        cfg.network,
        variant=variant,
        input_height=64,
        input_width=64,
        base_channels=16,
        blocks_per_stage=2,
        use_batchnorm=False,
        alpha=2.0,
    )
    cfg.synth = replace(
        cfg.synth,
        image_height=64,
        image_width=64,
        plate_width=(38.0, 54.0),
        plate_aspect=(1.8, 2.6),
        rotation_max_deg=25.0,
    )
    cfg.augment = data.AugmentConfig(
        enable_rectification=False,
        enable_aspect=True,
        aspect_range=(0.95, 1.05),
        enable_centering=False,
        enable_scale=True,
        scale_range=(0.9, 1.1),
        enable_rotation=True,
        rotation_deg=10.0,
        enable_mirror=True,
        mirror_prob=0.5,
        enable_translate=True,
        translate_frac=0.08,
        enable_crop=False,
        enable_colorspace=True,
        color_gain=(0.9, 1.1),
        color_bias=(-0.05, 0.05),
    )
    return cfg


def parse_loss_log(path):
    rows = Path(path).read_text().splitlines()
    assert rows[0] == "iter,location_loss,confidence_loss,total_loss"
    return [tuple(float(v) for v in r.split(",")) for r in rows[1:]]


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """One 500-iteration overfit training run, shared by criteria 5 and 6."""
    root = tmp_path_factory.mktemp("overfit")
    cfg = desk_config()
    cfg_path = root / "run.cfg"
    configio.save(cfg_path, cfg)
    ckpt = root / "overfit.ckpt"
    t0 = time.time()
    run_cli(
        ["train", "--config", cfg_path, "--synthetic", 8, "--synth-seed",
         OVERFIT_SYNTH_SEED, "--iterations", 500, "--batch-size", 8, "--seed",
         OVERFIT_MODEL_SEED, "--no-augment", "--out", ckpt, "--report-dir", root]
    )
    elapsed = time.time() - t0
    return {"cfg": cfg, "ckpt": ckpt, "log": root / "loss_log.csv", "elapsed": elapsed}


class TestCriterion1QiouOracle:
    def test_clipping_matches_raster_oracle(self):
        rng = np.random.default_rng(12345)
        t0 = time.time()
        worst = 0.0
        for _ in range(1000):
            a = random_convex_quad(rng)
            b = random_convex_quad(rng)
            dev = abs(geo.qiou(a, b) - raster_qiou(a.corners, b.corners))
            assert dev < 5e-3
            worst = max(worst, dev)
        elapsed = time.time() - t0
        assert elapsed < 60.0
        print(f"\n[PASS] criterion 1: qIoU oracle equivalence "
              f"(worst |delta| {worst:.2e} < 5e-3 over 1000 pairs, {elapsed:.1f}s < 60s)")


class TestCriterion2QiouAnalytic:
    def test_analytic_cases(self):
        a = geo.Quad.from_points(UNIT_SQUARE * 10)
        assert abs(geo.qiou(a, a) - 1.0) <= 1e-12
        b = geo.Quad.from_points(UNIT_SQUARE + 5.0)
        assert geo.qiou(geo.Quad.from_points(UNIT_SQUARE), b) == 0.0
        c = geo.Quad.from_points(UNIT_SQUARE)
        d = geo.Quad.from_points(UNIT_SQUARE + np.array([0.5, 0.0]))
        assert abs(geo.qiou(c, d) - 1.0 / 3.0) <= 1e-12
        print("\n[PASS] criterion 2: qIoU analytic cases "
              "(identical=1, disjoint=0, half-overlap=1/3, all within 1e-12)")


class TestCriterion3GradientCheck:
    def test_cmd_gradcheck_edge_model(self):
        t0 = time.time()
        proc = run_cli(["gradcheck", "--seed", 2, "--perturbation", 1e-5,
                        "--tolerance", 1e-3])
        elapsed = time.time() - t0
        assert elapsed < 300.0
        worst = proc.stdout.strip().splitlines()[-1]
        print(f"\n[PASS] criterion 3: gradient check ({worst}; {elapsed:.0f}s < 300s)")


class TestCriterion4ShapeLaw:
    @pytest.mark.parametrize("h,w", [(256, 256), (192, 256), (256, 400)])
    def test_grid_shape(self, h, w):
        cfg = network.NetworkConfig(
            input_height=h, input_width=w, base_channels=4, blocks_per_stage=1
        )
        model = network.build_model(cfg, seed=0)
        out = model.forward(np.zeros((1, h, w, 3)))
        assert out.data.shape == (1, h // 16, w // 16, 8)
        print(f"\n[PASS] criterion 4: shape law ({h}x{w} -> {h // 16}x{w // 16}x8)")


class TestCriterion5FrozenSobel:
    def test_kernels_bit_identical_after_training(self, overfit_run):
        model, _ = network.load_checkpoint(overfit_run["ckpt"])
        by_name = {p.name: p for p in model.parameters()}
        gx = by_name["sobel.gx"]
        gy = by_name["sobel.gy"]
        assert np.array_equal(gx.data.reshape(3, 3), SOBEL_GX)
        assert np.array_equal(gy.data.reshape(3, 3), SOBEL_GY)
        assert np.array_equal(SOBEL_GY, SOBEL_GX.T)
        trainable_names = {p.name for p in model.trainable_parameters()}
        assert "sobel.gx" not in trainable_names
        assert "sobel.gy" not in trainable_names
        print("\n[PASS] criterion 5: Sobel kernels bit-identical after 500 "
              "training iterations and excluded from the trainable registry")


class TestCriterion6Overfit:
    def test_loss_drop_and_training_qiou(self, overfit_run):
        rows = parse_loss_log(overfit_run["log"])
        assert len(rows) == 500
        first_total = rows[0][3]
        final_total = rows[-1][3]
        assert final_total < 0.1 * first_total
        assert overfit_run["elapsed"] < 600.0

        cfg = overfit_run["cfg"]
        scenes = [
            data.synth_scene(cfg.synth, OVERFIT_SYNTH_SEED + k) for k in range(8)
        ]
        batch = data.make_batch(scenes, 8, 64, 64, alpha=cfg.network.alpha)
        model, _ = network.load_checkpoint(overfit_run["ckpt"])
        grid = model.forward(batch.images, training=False)
        scores = []
        for i in range(8):
            dets = losses.decode_detections(
                grid.data[i], 0.5, 0.1, alpha=cfg.network.alpha
            )
            for gt in batch.quads[i]:
                scores.append(max((geo.qiou(gt, d.quad) for d in dets), default=0.0))
        mean_qiou = float(np.mean(scores))
        assert mean_qiou > 0.85
        print(f"\n[PASS] criterion 6: overfit run (loss {first_total:.1f} -> "
              f"{final_total:.3f}, ratio {final_total / first_total:.2e} < 0.1; "
              f"train qIoU {mean_qiou:.3f} > 0.85; {overfit_run['elapsed']:.0f}s < 600s)")


class TestEndToEndDetect:
    def test_trained_model_writes_rectified_crop(self, overfit_run, tmp_path):
        """Not a numbered criterion: detect CLI on a training scene with the
        trained overfit model must localize the plate and write a crop."""
        cfg = overfit_run["cfg"]
        scene = data.synth_scene(cfg.synth, OVERFIT_SYNTH_SEED)
        data.write_image(tmp_path / "scene.ppm", scene.image)
        out = tmp_path / "det"
        run_cli(
            ["detect", "--checkpoint", overfit_run["ckpt"], "--image",
             tmp_path / "scene.ppm", "--out-dir", out]
        )
        records = data.parse_annotations(out / "scene.quads.txt")
        assert records, "trained model found no plate in its own training scene"
        dets = records[0][1]
        assert len(dets) >= 1
        assert geo.qiou(dets[0], scene.quads[0]) > 0.7
        crop = data.read_image(out / "scene.plate0.ppm")
        assert crop.shape == (64, 128, 3)
        assert (out / "scene.overlay.ppm").exists()


@pytest.fixture(scope="module")
def comparison_run(tmp_path_factory):
    """Criterion 7 harness: trains both variants from one seed, then emits
    the two-row comparison via the eval CLI."""
    root = tmp_path_factory.mktemp("comparison")
    cfg = desk_config()
    cfg_path = root / "run.cfg"
    configio.save(cfg_path, cfg)
    ckpts = {}
    for variant in ("baseline", "edge_augmented"):
        ckpt = root / f"{variant}.ckpt"
        run_cli(
            ["train", "--config", cfg_path, "--variant", variant, "--synthetic", 200,
             "--synth-seed", TRAIN_SYNTH_SEED, "--iterations", 2000, "--batch-size", 8,
             "--seed", COMPARISON_MODEL_SEED, "--out", ckpt, "--report-dir", root / variant,
             "--threads", 2]
        )
        ckpts[variant] = ckpt
    rep_dir = root / "report"
    run_cli(
        ["eval", "--config", cfg_path, "--synthetic", 50, "--synth-seed",
         TEST_SYNTH_SEED, "--checkpoint", ckpts["baseline"], "--checkpoint",
         ckpts["edge_augmented"], "--report-dir", rep_dir, "--threads", 2]
    )
    return {"root": root, "rep_dir": rep_dir}


class TestCriterion7Generalization:
    def test_comparison_table_and_floor(self, comparison_run):
        rep_dir = comparison_run["rep_dir"]
        rows = (rep_dir / "comparison.csv").read_text().splitlines()
        assert rows[0].split(",")[:2] == ["model", "mean_qiou"]
        assert rows[0].split(",")[-1] == "delta_vs_first"
        parsed = [r.split(",") for r in rows[1:]]
        means = {r[0]: float(r[1]) for r in parsed}
        assert set(means) == {"baseline", "edge_augmented"}
        for name, mean in means.items():
            assert mean >= 0.5, f"{name} mean test qIoU {mean:.3f} below 0.5"
        delta = means["edge_augmented"] - means["baseline"]
        summary = (rep_dir / "summary.txt").read_text()
        assert "delta" in summary
        print(f"\n[PASS] criterion 7: generalization smoke test (baseline "
              f"{means['baseline']:.3f}, edge {means['edge_augmented']:.3f}, both >= 0.5; "
              f"edge-vs-baseline delta {delta:+.3f} reported, sign not asserted)")


class TestCriterion8RectificationRoundTrip:
    def test_render_warp_rectify(self):
        out_w, out_h = 64, 32

        def pattern(x, y):
            return np.stack(
                [
                    0.5 + 0.4 * np.sin(x / 17.0),
                    0.5 + 0.4 * np.cos(y / 13.0),
                    0.5 + 0.25 * np.sin((x + y) / 29.0),
                ],
                axis=-1,
            )

        amap = geo.AffineMap(1.2, 0.3, -0.2, 1.15, 60.0, 45.0)
        inv = amap.invert()
        ys, xs = np.mgrid[0:192, 0:192].astype(np.float64)
        scene = pattern(*np.moveaxis(inv.apply(np.stack([xs, ys], axis=-1)), -1, 0))

        rect = np.array(
            [[0, 0], [out_w - 1, 0], [out_w - 1, out_h - 1], [0, out_h - 1]], float
        )
        quad = geo.Quad.from_points(amap.apply(rect))

        fitted = geo.fit_affine(rect, quad.corners)
        corner_err = np.abs(fitted.apply(rect) - quad.corners).max()
        assert corner_err < 1e-9

        got = losses.rectify_plate(scene, quad, out_w, out_h)
        ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
        err = np.abs(got - pattern(xs, ys)).mean()
        assert err < 0.02
        print(f"\n[PASS] criterion 8: rectification round-trip (corners map to "
              f"{corner_err:.1e} px; mean abs pixel error {err:.4f} < 0.02)")


class TestCriterion9NormalizeInverse:
    def test_roundtrip_all_cells(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-500.0, 500.0, size=(10_000, 2))
        worst = 0.0
        for m in range(16):
            for n in range(16):
                back = losses.denormalize_points(
                    losses.normalize_points(pts, m, n), m, n
                )
                worst = max(worst, float(np.abs(back - pts).max()))
        assert worst < 1e-9
        print(f"\n[PASS] criterion 9: normalize/denormalize inverse law "
              f"(worst round-trip error {worst:.2e} < 1e-9 over 10,000 points x 256 cells)")


class TestCriterion10Determinism:
    def test_bitwise_identical_runs(self, tmp_path):
        cfg = desk_config()
        cfg.network = replace(cfg.network, base_channels=8, blocks_per_stage=1)
        cfg_path = tmp_path / "run.cfg"
        configio.save(cfg_path, cfg)
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            out.mkdir()
            run_cli(
                ["train", "--config", cfg_path, "--synthetic", 6, "--synth-seed", 11,
                 "--iterations", 25, "--batch-size", 4, "--seed", 33,
                 "--out", out / "model.ckpt", "--report-dir", out, "--threads", 1]
            )
            outputs.append(out)
        log_a = (outputs[0] / "loss_log.csv").read_bytes()
        log_b = (outputs[1] / "loss_log.csv").read_bytes()
        assert log_a == log_b
        ckpt_a = (outputs[0] / "model.ckpt").read_bytes()
        ckpt_b = (outputs[1] / "model.ckpt").read_bytes()
        assert ckpt_a == ckpt_b
        print("\n[PASS] criterion 10: determinism (two seeded single-threaded "
              "training runs produced bitwise-identical loss logs and checkpoints)")
