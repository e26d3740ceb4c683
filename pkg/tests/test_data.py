import numpy as np
import pytest

from platewarp import configio, data
from platewarp import geometry as geo
from platewarp.data import (
    AnnotationError,
    AugmentConfig,
    ImageFormatError,
    Sample,
    SynthConfig,
    augment,
    letterbox,
    make_batch,
    parse_annotations,
    read_image,
    synth_scene,
    write_annotations,
    write_image,
    write_image_gray,
)


class TestImageIO:
    def test_single_white_pixel(self, tmp_path):
        p = tmp_path / "white.ppm"
        p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        img = read_image(p)
        assert img.shape == (1, 1, 3)
        assert np.all(img == 1.0)

    def test_write_read_quantization_bound(self, tmp_path, rng):
        img = rng.uniform(size=(13, 9, 3))
        p = tmp_path / "x.ppm"
        write_image(p, img)
        back = read_image(p)
        assert np.abs(back - img).max() <= 1.0 / 510.0 + 1e-12

    def test_gray_read_replicates_channels(self, tmp_path, rng):
        img = rng.uniform(size=(5, 7))
        p = tmp_path / "g.pgm"
        write_image_gray(p, img)
        back = read_image(p)
        assert back.shape == (5, 7, 3)
        assert np.array_equal(back[..., 0], back[..., 1])

    def test_ascii_ppm_rejected(self, tmp_path):
        p = tmp_path / "a.ppm"
        p.write_bytes(b"P3\n1 1\n255\n255 255 255\n")
        with pytest.raises(ImageFormatError):
            read_image(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\xff\xff")
        with pytest.raises(ImageFormatError):
            read_image(p)

    def test_wrong_maxval_rejected(self, tmp_path):
        p = tmp_path / "m.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ImageFormatError):
            read_image(p)

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n1 1\n# another\n255\n\x80\x80\x80")
        img = read_image(p)
        assert img[0, 0, 0] == pytest.approx(128 / 255)


class TestAnnotations:
    def test_parse_canonicalizes_corners(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text("img1.ppm 10 10 110 12 108 60 8 58\n")
        records = parse_annotations(p)
        assert len(records) == 1
        path, quads = records[0]
        assert path == "img1.ppm"
        assert np.allclose(quads[0].corners[0], [10, 10])
        assert np.allclose(quads[0].corners[2], [108, 60])

    def test_wrong_field_count_names_line(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text("# header\nimg1.ppm 1 2 3 4 5 6 7\n")
        with pytest.raises(AnnotationError, match=":2:"):
            parse_annotations(p)

    def test_non_numeric_rejected(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text("img1.ppm 1 2 3 4 5 6 7 x\n")
        with pytest.raises(AnnotationError, match="non-numeric"):
            parse_annotations(p)

    def test_concave_quad_rejected_with_line(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text("ok.ppm 0 0 10 0 10 10 0 10\nbad.ppm 0 0 40 0 10 10 0 40\n")
        with pytest.raises(AnnotationError, match=":2:"):
            parse_annotations(p)

    def test_empty_file_empty_sequence(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text("# only comments\n\n")
        assert parse_annotations(p) == []

    def test_multiple_lines_per_image_grouped(self, tmp_path):
        p = tmp_path / "ann.txt"
        p.write_text(
            "a.ppm 0 0 10 0 10 10 0 10\n"
            "b.ppm 5 5 15 5 15 15 5 15\n"
            "a.ppm 20 20 30 20 30 30 20 30\n"
        )
        records = parse_annotations(p)
        assert [r[0] for r in records] == ["a.ppm", "b.ppm"]
        assert len(records[0][1]) == 2

    def test_write_parse_roundtrip(self, tmp_path, rng):
        # keep only convex draws; regenerate deterministically until 5 good ones
        good = []
        while len(good) < 5:
            pts = rng.uniform(10, 90, (4, 2))
            try:
                good.append(geo.Quad.from_points(pts))
            except ValueError:
                pass
        p = tmp_path / "ann.txt"
        write_annotations(p, [("img.ppm", good)])
        back = parse_annotations(p)
        assert len(back[0][1]) == len(good)
        for qa, qb in zip(good, back[0][1]):
            assert np.array_equal(qa.corners, qb.corners)


class TestSynthScene:
    def test_no_plates_config(self):
        cfg = SynthConfig(plates_min=0, plates_max=0)
        sample = synth_scene(cfg, 5)
        assert sample.quads == []
        assert sample.image.shape == (128, 128, 3)

    def test_deterministic_for_seed(self):
        cfg = SynthConfig()
        a = synth_scene(cfg, 42)
        b = synth_scene(cfg, 42)
        assert np.array_equal(a.image, b.image)
        assert all(np.array_equal(x.corners, y.corners) for x, y in zip(a.quads, b.quads))

    def test_values_in_unit_range(self):
        sample = synth_scene(SynthConfig(), 9)
        assert sample.image.min() >= 0.0
        assert sample.image.max() <= 1.0

    def test_generated_quads_convex_positive_min_side(self):
        cfg = SynthConfig(plates_min=1, plates_max=2)
        for seed in range(10_000):
            sample = synth_scene(cfg, seed)
            for q in sample.quads:  # Quad construction enforces convexity
                assert q.area() > 0
                sides = np.linalg.norm(q.corners - np.roll(q.corners, -1, axis=0), axis=1)
                assert sides.min() >= cfg.min_side_px - 1e-9

    def test_plate_interior_has_edge_signal(self):
        from platewarp.autodiff import Tensor
        from platewarp.edges import EdgeBranch

        sample = synth_scene(SynthConfig(), 3)
        assert sample.quads
        feats = EdgeBranch().features(Tensor(sample.image[None])).data[0]
        ys, xs = np.mgrid[0:128, 0:128]
        inside = sample.quads[0].contains(np.stack([xs, ys], -1).astype(float))
        assert feats[..., 2][inside].mean() > 5 * feats[..., 2][~inside].mean()


class TestAugment:
    def _sample(self, seed=0):
        return synth_scene(SynthConfig(plate_width=(50.0, 70.0)), seed)

    def test_disabled_config_is_identity(self):
        sample = self._sample()
        out = augment(sample, AugmentConfig.disabled(), 7)
        assert np.array_equal(out.image, sample.image)
        assert all(
            np.array_equal(a.corners, b.corners) for a, b in zip(out.quads, sample.quads)
        )

    def test_deterministic(self):
        sample = self._sample()
        cfg = AugmentConfig()
        a = augment(sample, cfg, 123)
        b = augment(sample, cfg, 123)
        assert np.array_equal(a.image, b.image)
        assert all(np.array_equal(x.corners, y.corners) for x, y in zip(a.quads, b.quads))

    def test_mirror_reflects_quad_x(self):
        sample = self._sample()
        cfg = AugmentConfig.disabled()
        cfg = data.AugmentConfig(
            **{
                **cfg.__dict__,
                "enable_mirror": True,
                "mirror_prob": 1.0,
            }
        )
        out = augment(sample, cfg, 5)
        w = sample.image.shape[1]
        want = sample.quads[0].corners.copy()
        want[:, 0] = w - 1 - want[:, 0]
        got = out.quads[0].corners
        assert np.allclose(sorted(map(tuple, got)), sorted(map(tuple, want)))
        assert np.allclose(out.image, sample.image[:, ::-1], atol=1e-12)

    def test_pixels_follow_quads_exactly(self):
        # encode source coordinates in the pixel values (bilinear sampling is
        # exact on a linear image), augment, then read the original position
        # back at each transformed corner: label and pixel transforms agree
        from platewarp.losses import bilinear_sample

        h, w = 128, 128
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        coord_image = np.stack([xs / w, ys / h, np.zeros_like(xs)], axis=-1)
        quad = geo.Quad.from_points([[40.0, 50.0], [86.0, 54.0], [84.0, 76.0], [38.0, 72.0]])
        sample = Sample(image=coord_image, quads=[quad], id="coords")
        cfg = AugmentConfig(enable_colorspace=False, enable_crop=False)
        checked = 0
        for seed in range(6):
            out = augment(sample, cfg, seed)
            for dst in out.quads:
                for corner in dst.corners:
                    if not (2 <= corner[0] <= w - 3 and 2 <= corner[1] <= h - 3):
                        continue
                    rgb = bilinear_sample(out.image, corner)
                    readback = np.array([rgb[0] * w, rgb[1] * h])
                    if readback[0] < 1 or readback[1] < 1:  # off-frame fill
                        continue
                    dist = np.linalg.norm(quad.corners - readback, axis=1).min()
                    assert dist < 0.5
                    checked += 1
        assert checked >= 8

    def test_all_quads_lost_returns_plateless(self):
        sample = self._sample()
        cfg = data.AugmentConfig(
            **{
                **AugmentConfig.disabled().__dict__,
                "enable_translate": True,
                "translate_frac": 4.0,  # guaranteed to throw plates off-frame
            }
        )
        out = augment(sample, cfg, 11)
        assert out.quads == []
        assert out.image.shape == sample.image.shape


class TestMakeBatch:
    def test_batch_of_one_shapes(self):
        sample = synth_scene(SynthConfig(), 1)
        batch = make_batch([sample], 1, 128, 128)
        assert batch.images.shape == (1, 128, 128, 3)
        assert len(batch.targets) == 1
        assert batch.targets[0].iobj.shape == (8, 8)

    def test_same_size_passthrough_is_exact(self):
        sample = synth_scene(SynthConfig(), 1)
        batch = make_batch([sample], 1, 128, 128)
        assert np.array_equal(batch.images[0], sample.image)
        assert np.array_equal(batch.quads[0][0].corners, sample.quads[0].corners)

    def test_letterbox_wide_image_pads_and_offsets_quads(self):
        img = np.zeros((64, 128, 3))
        quad = geo.Quad.from_points([[10, 10], [50, 10], [50, 30], [10, 30]])
        sample = Sample(image=img, quads=[quad], id="wide")
        batch = make_batch([sample], 1, 128, 128)
        # scale 1, vertical padding (128-64)//2 = 32
        assert np.all(batch.images[0][:32] == 0.5)
        assert np.all(batch.images[0][96:] == 0.5)
        want = quad.corners + np.array([0.0, 32.0])
        assert np.allclose(batch.quads[0][0].corners, want)

    def test_halving_resize_halves_quads(self):
        img = np.zeros((256, 256, 3))
        quad = geo.Quad.from_points([[20, 20], [120, 20], [120, 80], [20, 80]])
        sample = Sample(image=img, quads=[quad], id="big")
        batch = make_batch([sample], 1, 128, 128)
        assert np.allclose(batch.quads[0][0].corners, quad.corners * 0.5)

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            make_batch([], 0, 64, 64)

    def test_letterbox_identity_map(self):
        img = np.full((64, 64, 3), 0.3)
        out, amap = letterbox(img, 64, 64)
        assert np.array_equal(out, img)
        assert amap == geo.AffineMap.identity()


class TestConfigIO:
    def test_roundtrip_canonical(self):
        cfg = configio.RunConfig.default()
        text = configio.serialize(cfg)
        assert configio.serialize(configio.parse(text)) == text

    def test_overrides_applied(self):
        text = (
            "network.variant = baseline\n"
            "network.base_channels = 4\n"
            "adam.learning_rate = 0.01\n"
            "augment.mirror_prob = 0.75\n"
            "synth.plate_width_min = 30\n"
            "synth.plate_width_max = 50\n"
        )
        cfg = configio.parse(text)
        assert cfg.network.variant == "baseline"
        assert cfg.network.base_channels == 4
        assert cfg.adam.learning_rate == 0.01
        assert cfg.augment.mirror_prob == 0.75
        assert cfg.synth.plate_width == (30.0, 50.0)

    def test_unknown_key_rejected(self):
        with pytest.raises(Exception):
            configio.parse("network.bogus = 1\n")

    def test_comments_and_blank_lines_ok(self):
        cfg = configio.parse("# hello\n\nnetwork.variant = baseline\n")
        assert cfg.network.variant == "baseline"
