import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image, ImageEnhance, ImageOps

from mixpl import color
from mixpl.augment import (COLOR_SPACE, GEOMETRIC_OPS, AugmentPipeline, AugmentSpec, apply_color,
                           apply_geometric, apply_pipeline, erased_coverage, filter_erased, flip,
                           geometric_transform, rand_augment, random_erasing, random_flip,
                           random_resize, resize, resize_target, sample_erasing,
                           transfer_labels, view_rng)
from mixpl.boxes import Annotation, BBox
from mixpl.raster import ImageRaster
from mixpl.transforms import AffineTransform, to_index_space, warp_labels

from conftest import random_box


def _img(rng, w=64, h=48):
    return ImageRaster.from_array(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def hull_oracle(tf, box, n=41):
    """Transform a dense grid of points covering the box and take its hull."""
    xs = np.linspace(box.x1, box.x2, n)
    ys = np.linspace(box.y1, box.y2, n)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], 1)
    m = tf.matrix
    out = pts @ m[:, :2].T + m[:, 2]
    return out.min(0), out.max(0)


class TestResize:
    def test_scale_two(self):
        assert resize_target((500, 400), 800, 1333) == (1000, 800)

    def test_long_side_cap(self):
        assert resize_target((4000, 1000), 1200, 1333) == (1333, 333)

    def test_box_scales(self):
        _, labels, _ = resize((100, 100), [Annotation(BBox(10, 10, 20, 20), 1)], (200, 200))
        assert labels[0].box == BBox(20, 20, 40, 40)

    def test_random_range(self, rng):
        for _ in range(200):
            (w, h), _, tf = random_resize((1333, 800), [], rng)
            assert 400 - 1 <= min(w, h) <= 1200 + 1 and max(w, h) <= 1333
            assert abs(w / h - 1333 / 800) < 0.01

    def test_raster_and_geometry_modes_agree(self, rng):
        img = _img(rng, 50, 40)
        labels = [Annotation(BBox(5, 5, 30, 20), 1)]
        a = random_resize(img, labels, np.random.default_rng(3))
        b = random_resize(img.size, labels, np.random.default_rng(3))
        assert a[0].size == b[0] and a[1] == b[1]


class TestFlip:
    def test_box_reflection(self):
        _, labels, _ = flip((100, 50), [Annotation(BBox(0, 0, 10, 10), 1)])
        assert labels[0].box == BBox(90, 0, 100, 10)

    def test_double_flip_identity(self, rng):
        img = _img(rng)
        labels = [Annotation(random_box(rng, 64, 48), 2)]
        r1, l1, _ = flip(img, labels)
        r2, l2, _ = flip(r1, l1)
        assert r2 == img
        np.testing.assert_allclose(l2[0].box.to_array(), labels[0].box.to_array(), atol=1e-12)

    def test_prob_zero(self, rng):
        for _ in range(1000):
            _, _, tf = random_flip((10, 10), [], rng, prob=0.0)
            assert tf.tag == "identity"


def _pil(arr):
    return Image.fromarray(arr, "RGB")


class TestColorOracle:
    """Each numpy op agrees with Pillow's reference implementation."""

    @pytest.fixture
    def arr(self, rng):
        return rng.integers(30, 200, (37, 53, 3), dtype=np.uint8)

    def test_autocontrast(self, arr):
        assert np.array_equal(color.autocontrast(arr), np.asarray(ImageOps.autocontrast(_pil(arr))))

    def test_equalize(self, arr):
        assert np.array_equal(color.equalize(arr), np.asarray(ImageOps.equalize(_pil(arr))))

    @pytest.mark.parametrize("thr", [0, 64, 128, 200, 256])
    def test_solarize(self, arr, thr):
        assert np.array_equal(color.solarize(arr, thr), np.asarray(ImageOps.solarize(_pil(arr), thr)))

    @pytest.mark.parametrize("bits", [4, 5, 6, 7, 8])
    def test_posterize(self, arr, bits):
        assert np.array_equal(color.posterize(arr, bits), np.asarray(ImageOps.posterize(_pil(arr), bits)))

    @pytest.mark.parametrize("name,enh", [("brightness", ImageEnhance.Brightness),
                                          ("color", ImageEnhance.Color),
                                          ("contrast", ImageEnhance.Contrast),
                                          ("sharpness", ImageEnhance.Sharpness)])
    @pytest.mark.parametrize("factor", [0.1, 0.55, 1.0, 1.37, 1.9])
    def test_enhance(self, arr, name, enh, factor):
        ours = getattr(color, name)(arr, factor)
        ref = np.asarray(enh(_pil(arr)).enhance(factor))
        assert np.array_equal(ours, ref)

    def test_brightness_one_is_identity(self, arr):
        assert np.array_equal(color.brightness(arr, 1.0), arr)

    def test_color_ops_keep_boxes(self, rng):
        img = _img(rng)
        labels = [Annotation(random_box(rng, 64, 48), 1) for _ in range(5)]
        for _ in range(30):
            r, out, tf = rand_augment(img, labels, rng, "color")
            assert out == labels and tf is None
        assert len(COLOR_SPACE) == 8


class TestGeometric:
    def test_translate_x(self):
        tf = geometric_transform("TranslateX", 0.1, (100, 100))
        out = warp_labels([Annotation(BBox(10, 10, 20, 20), 1), Annotation(BBox(85, 0, 99, 5), 1)],
                          tf, (100, 100))
        assert out[0].box == BBox(20, 10, 30, 20)
        assert out[1].box == BBox(95, 0, 100, 5)

    def test_rotate_thirty_hand_computed(self):
        tf = geometric_transform("Rotate", 30, (100, 100))
        box = warp_labels([Annotation(BBox(40, 40, 60, 60), 1)], tf, (100, 100))[0].box
        # a 20x20 square rotated 30 degrees about its own centre has half-extent
        # 10 * (cos 30 + sin 30)
        half = 10 * (math.cos(math.radians(30)) + math.sin(math.radians(30)))
        np.testing.assert_allclose(box.to_array(), [50 - half, 50 - half, 50 + half, 50 + half], atol=1e-9)

    def test_rotation_direction_matches_opencv(self):
        tf = geometric_transform("Rotate", 30, (100, 80))
        cv = __import__("cv2").getRotationMatrix2D((50 - 0.5, 40 - 0.5), 30, 1.0)
        np.testing.assert_allclose(to_index_space(tf), cv, atol=1e-9)

    def test_dense_hull_oracle(self, rng):
        for _ in range(300):
            op = list(GEOMETRIC_OPS)[rng.integers(5)]
            mag = rng.uniform(*GEOMETRIC_OPS[op])
            tf = geometric_transform(op, mag, (640, 480))
            box = random_box(rng, 640, 480)
            got = tf.map_box(box)
            lo, hi = hull_oracle(tf, box)
            np.testing.assert_allclose(got.to_array(), np.r_[lo, hi], atol=1.0)

    def test_raster_follows_boxes(self):
        # nearest-neighbour warp of a solid rectangle lands inside the mapped box (+1 px)
        data = np.zeros((120, 160, 3), np.uint8)
        data[40:70, 50:100] = 255
        img = ImageRaster.from_array(data)
        labels = [Annotation(BBox(50, 40, 100, 70), 1)]
        for op, mag in [("ShearX", 0.3), ("ShearY", -0.25), ("Rotate", 25.0), ("TranslateY", 0.1)]:
            r, out, _ = apply_geometric(img, labels, op, mag, interpolation="nearest")
            ys, xs = np.nonzero(r.data[..., 0] > 127)
            b = out[0].box
            assert xs.min() >= b.x1 - 1 and xs.max() + 1 <= b.x2 + 1
            assert ys.min() >= b.y1 - 1 and ys.max() + 1 <= b.y2 + 1
            assert xs.min() <= b.x1 + 1.5 and xs.max() + 1 >= b.x2 - 1.5

    def test_inverse_round_trip(self, rng):
        for _ in range(10_000):
            m = np.c_[rng.uniform(-2, 2, (2, 2)) + 2 * np.eye(2), rng.uniform(-100, 100, 2)]
            tf = AffineTransform(m)
            if abs(tf.determinant) < 1e-3:
                continue
            assert (tf.inverse() @ tf).allclose(AffineTransform.identity(), atol=1e-6)

    def test_singular_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            AffineTransform([[1, 2, 0], [2, 4, 0]]).inverse()


class TestErasing:
    def test_zero_patches(self, rng):
        img = _img(rng)
        labels = [Annotation(BBox(1, 1, 20, 20), 1)]
        r, out = random_erasing(img, labels, rng, n_patches=0)
        assert r == img and out == labels

    def test_fully_covered_dropped(self):
        box = BBox(10, 10, 20, 20)
        assert erased_coverage(box, [(5, 5, 25, 25)]) == 1.0
        assert filter_erased([Annotation(box, 1)], [(5, 5, 25, 25)]) == []

    def test_half_covered_kept(self):
        box = BBox(10, 10, 20, 20)
        assert erased_coverage(box, [(0, 0, 15, 30)]) == pytest.approx(0.5)
        assert len(filter_erased([Annotation(box, 1)], [(0, 0, 15, 30)])) == 1

    def test_pixel_count_oracle(self, rng):
        # integer boxes: coverage is a plain count of erased pixels inside the box
        for _ in range(300):
            x1, y1 = rng.integers(0, 50, 2)
            x2, y2 = x1 + rng.integers(1, 30), y1 + rng.integers(1, 30)
            box = BBox(float(x1), float(y1), float(x2), float(y2))
            rects = sample_erasing((80, 80), rng, (1, 20), (0.0, 0.3))
            mask = np.zeros((80, 80), bool)
            for a, b, c, d in rects:
                mask[b:d, a:c] = True
            want = mask[y1:y2, x1:x2].sum() / ((x2 - x1) * (y2 - y1))
            assert erased_coverage(box, rects) == pytest.approx(want, abs=1e-12)
            kept = filter_erased([Annotation(box, 1)], rects)
            assert (len(kept) == 0) == (want > 0.7)

    def test_fractional_box_supersampled(self, rng):
        for _ in range(50):
            box = random_box(rng, 40, 40, min_side=3)
            rects = sample_erasing((40, 40), rng, (1, 8), (0.0, 0.5))
            mask = np.zeros((40, 40), bool)
            for a, b, c, d in rects:
                mask[b:d, a:c] = True
            s = 20  # sub-samples per pixel
            xs = (np.arange(40 * s) + 0.5) / s
            inside_x = (xs >= box.x1) & (xs < box.x2)
            inside_y = (xs >= box.y1) & (xs < box.y2)
            fine = np.repeat(np.repeat(mask, s, 0), s, 1)
            est = fine[np.ix_(inside_y, inside_x)].mean()
            assert erased_coverage(box, rects) == pytest.approx(est, abs=0.02)

    def test_erase_fills_zero(self, rng):
        img = ImageRaster.from_array(np.full((30, 30, 3), 200, np.uint8))
        r, _ = random_erasing(img, [], np.random.default_rng(0), n_patches=5, ratio=(0.2, 0.3))
        assert (r.data == 0).any() and set(np.unique(r.data)) <= {0, 200}


class TestPipeline:
    def test_stage_lists(self):
        assert AugmentSpec(kind="weak").stages == ("resize", "flip")
        assert AugmentSpec(kind="labeled").stages == ("resize", "flip", "color")
        assert AugmentSpec(kind="strong").stages[-2:] == ("geometric", "erasing")

    def test_weak_is_resize_flip(self, rng):
        view = apply_pipeline(AugmentSpec(kind="weak"), (1000, 800), [], rng)
        assert view.erased == []
        m = view.transform.matrix
        assert m[0, 1] == 0 and m[1, 0] == 0 and abs(abs(m[0, 0]) - m[1, 1]) < 0.01

    def test_deterministic(self, rng):
        img = _img(rng, 120, 90)
        labels = [Annotation(BBox(10, 10, 60, 50), 3)]
        spec = AugmentSpec(kind="strong", short_range=(90, 120), long_cap=200)
        a = apply_pipeline(spec, img, labels, view_rng(5, 7, "strong"))
        b = apply_pipeline(spec, img, labels, view_rng(5, 7, "strong"))
        assert a.raster == b.raster and a.labels == b.labels and a.transform.allclose(b.transform, 0)

    def test_geometry_mode_matches_raster_mode(self, rng):
        img = _img(rng, 120, 90)
        labels = [Annotation(BBox(10, 10, 60, 50), 3), Annotation(BBox(70, 20, 110, 80), 1)]
        spec = AugmentSpec(kind="strong", short_range=(90, 120), long_cap=200)
        for k in range(20):
            a = apply_pipeline(spec, img, labels, view_rng(1, k, "strong"))
            b = apply_pipeline(spec, img.size, labels, view_rng(1, k, "strong"))
            assert a.size == b.size and a.labels == b.labels and a.erased == b.erased

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AugmentSpec(kind="medium")
        with pytest.raises(ValueError):
            AugmentSpec(flip_prob=2)

    def test_estimator(self, rng):
        img = _img(rng, 120, 90)
        pipe = AugmentPipeline(kind="weak", short_range=(60, 60), seed=3).fit()
        views = pipe.transform([(1, img, [Annotation(BBox(0, 0, 40, 40), 1)])])
        assert views[0].size == (80, 60)
        assert pipe.get_params()["kind"] == "weak"


class TestTransfer:
    LABELS = [Annotation(BBox(10, 20, 30, 50), 1)]

    def test_same_transforms(self):
        tf = AffineTransform.scale(1.5) @ AffineTransform.hflip(100)
        out = transfer_labels(self.LABELS, tf, tf, (500, 500))
        np.testing.assert_allclose(out[0].box.to_array(), self.LABELS[0].box.to_array(), atol=1e-6)

    def test_scale_two_to_four(self):
        out = transfer_labels(self.LABELS, AffineTransform.scale(2), AffineTransform.scale(4), (500, 500))
        assert out[0].box == BBox(20, 40, 60, 100)

    def test_unflip(self):
        out = transfer_labels(self.LABELS, AffineTransform.hflip(100), AffineTransform.identity(), (100, 100))
        assert out[0].box == BBox(70, 20, 90, 50)

    def test_matches_direct_augmentation(self, rng):
        # moving weak-view GT to the strong view equals augmenting GT directly
        labels = [Annotation(random_box(rng, 600, 400, min_side=20), 1) for _ in range(6)]
        for k in range(30):
            weak = apply_pipeline(AugmentSpec(kind="weak"), (600, 400), labels, view_rng(0, k, "weak"))
            strong_geo = apply_pipeline(AugmentSpec(kind="strong", erase_patches=(0, 0)), (600, 400),
                                        labels, view_rng(0, k, "strong"))
            moved = transfer_labels(weak.labels, weak.transform, strong_geo.transform, strong_geo.size)
            direct = warp_labels(labels, strong_geo.transform, strong_geo.size)
            # the weak view is scale + flip only, so undoing it is exact
            assert len(moved) == len(direct)
            for a, b in zip(moved, direct):
                np.testing.assert_allclose(a.box.to_array(), b.box.to_array(), atol=1e-6)
