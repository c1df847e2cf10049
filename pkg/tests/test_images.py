import numpy as np
import pytest

from mathscribe.fixtures import wobble
from mathscribe.images import (
    AugmentParams,
    AugmentRanges,
    ImageError,
    augment,
    as_gray_image,
    load_png,
    normalize_intensity,
    pad_width_to_multiple,
    resize_for_training,
    sample_augment_params,
    save_png,
)
from mathscribe.rendering import RenderParams, StubRenderer


def _stroke_image(h=64, w=96, frac=0.05, seed=0):
    rng = np.random.default_rng(seed)
    img = np.zeros((h, w), dtype=np.float32)
    n = int(h * w * frac)
    rows = rng.integers(0, h, n)
    cols = rng.integers(0, w, n)
    img[rows, cols] = 1.0
    return img


class TestContract:
    def test_rejects_out_of_range(self):
        with pytest.raises(ImageError):
            as_gray_image(np.full((4, 4), 2.0))

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ImageError):
            as_gray_image(np.zeros((4, 4, 3)))


class TestNormalizeIntensity:
    def test_inverts_bright_background(self):
        img = np.ones((32, 32), dtype=np.float32)
        img[10:20, 10:20] = 0.0  # dark ink on white
        out = normalize_intensity(img)
        assert out[0, 0] == 0.0
        assert out[15, 15] >= 0.95

    def test_already_normalized_unchanged(self):
        img = _stroke_image(frac=0.05)
        out = normalize_intensity(img)
        assert np.abs(out - img).max() <= 1e-6

    def test_linear_ramp_affine_rule(self):
        # Direct evaluation of the affine rule: mode-bin background (the
        # minimum here), 99th-percentile ink, clamp.
        vals = np.linspace(0.0, 1.0, 100, dtype=np.float32)
        img = np.tile(vals, (4, 1))
        out = normalize_intensity(img)
        ink = np.percentile(img, 99.0)
        expected = np.clip((vals - vals[0]) / (ink - vals[0]), 0.0, 1.0)
        assert np.allclose(out[0], expected, atol=1e-5)
        assert out.min() == 0.0 and out.max() == 1.0
        interior = out[0][vals < ink]
        assert (np.diff(interior) > 0).all()

    def test_constant_image_returned_unchanged(self):
        img = np.full((8, 8), 0.25, dtype=np.float32)
        assert (normalize_intensity(img) == img).all()

    def test_idempotent_on_pipeline_images(self):
        stub = StubRenderer()
        rng = np.random.default_rng(3)
        imgs = [
            stub.render("x^{2}+y", RenderParams(font_size=24, padding=6)),
            wobble(stub.render(r"\frac{a}{b}", RenderParams(font_size=24, padding=8)), rng),
            augment(stub.render("a+b", RenderParams(font_size=20, padding=4)),
                    AugmentParams(rotation=3.0, shear=0.05, border_pad=12, aspect_scale=1.05)),
        ]
        for img in imgs:
            once = normalize_intensity(img)
            twice = normalize_intensity(once)
            assert np.abs(twice - once).max() <= 1e-6

    def test_monotone(self):
        img = _stroke_image()
        out = normalize_intensity(img)
        order = np.argsort(img.ravel(), kind="stable")
        assert (np.diff(out.ravel()[order]) >= -1e-7).all()


class TestAugment:
    def test_identity_params_is_exact_zero_padding(self):
        img = _stroke_image(h=20, w=30)
        out = augment(img, AugmentParams(rotation=0.0, shear=0.0, border_pad=10, aspect_scale=1.0))
        assert out.shape == (40, 50)
        assert (out[10:30, 10:40] == img).all()
        assert out[:10].sum() == 0 and out[:, :10].sum() == 0

    def test_rotation_moves_centroid_by_closed_form(self):
        h = w = 101
        img = np.zeros((h, w), dtype=np.float32)
        img[20:26, 70:76] = 1.0  # off-center blob
        params = AugmentParams(rotation=4.0, shear=0.0, border_pad=0, aspect_scale=1.0)
        out = augment(img, params)
        rows, cols = np.nonzero(out > 0.5)
        cy, cx = rows.mean(), cols.mean()
        theta = np.radians(4.0)
        # forward map in (x, y) about the canvas center
        oy, ox = np.nonzero(img)
        px = ox.mean() - (w - 1) / 2.0
        py = oy.mean() - (h - 1) / 2.0
        ex = np.cos(theta) * px - np.sin(theta) * py + (out.shape[1] - 1) / 2.0
        ey = np.sin(theta) * px + np.cos(theta) * py + (out.shape[0] - 1) / 2.0
        assert abs(cx - ex) <= 1.0 and abs(cy - ey) <= 1.0

    def test_output_in_unit_range(self):
        img = _stroke_image()
        rng = np.random.default_rng(5)
        for _ in range(10):
            params = sample_augment_params(rng)
            out = augment(img, params)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_sampled_params_within_ranges(self):
        rng = np.random.default_rng(2)
        ranges = AugmentRanges()
        for _ in range(200):
            p = sample_augment_params(rng, ranges)
            assert -4.0 <= p.rotation <= 4.0
            assert 10 <= p.border_pad <= 20
            assert 0.9 <= p.aspect_scale <= 1.1
            assert -0.1 <= p.shear <= 0.1


class TestResize:
    def test_upscale_within_limit(self):
        out = resize_for_training(np.zeros((64, 256), dtype=np.float32), 128, 512)
        assert out.shape == (128, 512)

    def test_reject_beyond_max_width(self):
        assert resize_for_training(np.zeros((64, 300), dtype=np.float32), 128, 512) is None

    def test_boundary_width_513_rejected(self):
        img = np.zeros((128, 513), dtype=np.float32)
        assert resize_for_training(img, 128, 512) is None
        assert resize_for_training(np.zeros((128, 512), dtype=np.float32), 128, 512) is not None

    def test_conforming_image_unchanged(self):
        img = _stroke_image(h=128, w=512)
        out = resize_for_training(img, 128, 512)
        assert (out == img).all()

    def test_aspect_preserved_within_one_pixel(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h = int(rng.integers(10, 200))
            w = int(rng.integers(10, 400))
            out = resize_for_training(np.zeros((h, w), dtype=np.float32), 64, 10_000)
            expected_w = w * 64 / h
            assert abs(out.shape[1] - expected_w) <= 1.0

    def test_pad_width_to_multiple(self):
        img = _stroke_image(h=8, w=30)
        out = pad_width_to_multiple(img, 16)
        assert out.shape == (8, 32)
        assert (out[:, 30:] == 0).all()


class TestPngIO:
    def test_round_trip(self, tmp_path):
        img = _stroke_image()
        save_png(img, tmp_path / "x.png")
        back = load_png(tmp_path / "x.png")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1 / 255 + 1e-6


class TestEmittedImageSparsity:
    def test_foreground_fraction_strictly_between_0_and_half(self, gan_data):
        from mathscribe.manifest import read_manifest

        for key in ("rendered", "handwritten"):
            records, _ = read_manifest(gan_data[key])
            for rec in records:
                img = load_png(gan_data[key] / rec.image_path)
                frac = float((img > 0.5).mean())
                assert 0.0 < frac < 0.5, f"{rec.id}: foreground fraction {frac}"
