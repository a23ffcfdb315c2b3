import numpy as np
import pytest

from conftest import random_image, random_rect
from services.geometry import (
    ImageBuffer, Rect, crop_image, flip_horizontal, integral_image, intersect_area,
    intersection_over_reference, iou, resize_shorter_side, scale_rect, scaled_size,
)
from utils.errors import GeometryError


def _mask(r: Rect, width, height):
    m = np.zeros((height, width), dtype=bool)
    m[r.y0:r.y1, r.x0:r.x1] = True
    return m


class TestRect:
    def test_rejects_empty_and_inverted(self):
        with pytest.raises(GeometryError):
            Rect(5, 0, 5, 10)
        with pytest.raises(GeometryError):
            Rect(0, 10, 10, 2)

    def test_rejects_non_integers(self):
        with pytest.raises(GeometryError):
            Rect(0.0, 0, 4, 4)

    def test_basic_measures(self):
        r = Rect(2, 3, 10, 7)
        assert (r.width, r.height, r.area) == (8, 4, 32)
        assert r.center == (6.0, 5.0)

    def test_clip(self):
        assert Rect(-5, -5, 10, 10).clip(8, 8) == Rect(0, 0, 8, 8)
        assert Rect(20, 20, 30, 30).clip(8, 8) is None

    def test_mirrored_is_involution(self):
        r = Rect(1, 2, 5, 9)
        assert r.mirrored(12).mirrored(12) == r
        assert r.mirrored(12) == Rect(7, 2, 11, 9)


class TestOverlapOracle:
    def test_intersection_and_iou_match_pixel_enumeration(self, rng):
        for _ in range(1000):
            a, b = random_rect(rng, 40, 30), random_rect(rng, 40, 30)
            ma, mb = _mask(a, 40, 30), _mask(b, 40, 30)
            inter = int((ma & mb).sum())
            union = int((ma | mb).sum())
            assert intersect_area(a, b) == inter
            assert iou(a, b) == inter / union

    def test_iou_examples(self):
        assert iou(Rect(0, 0, 10, 10), Rect(0, 0, 10, 10)) == 1.0
        assert iou(Rect(0, 0, 10, 10), Rect(10, 0, 20, 10)) == 0.0
        assert iou(Rect(0, 0, 10, 10), Rect(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_intersection_over_reference(self):
        assert intersection_over_reference(Rect(0, 0, 100, 100), Rect(10, 10, 20, 20)) == 1.0


class TestIntegralImage:
    def test_region_sums_match_brute_force(self, rng):
        img = random_image(rng, 37, 29)
        table = integral_image(img)
        for _ in range(200):
            r = random_rect(rng, 37, 29)
            expected = img.pixels[r.y0:r.y1, r.x0:r.x1].astype(np.int64).sum(axis=(0, 1))
            np.testing.assert_array_equal(table.region_sum(r), expected)

    def test_full_image_sum(self, rng):
        img = random_image(rng, 8, 6, channels=1)
        total = integral_image(img).region_sum(img.frame())
        assert int(total[0]) == int(img.pixels.astype(np.int64).sum())


class TestImageOps:
    def test_buffer_is_read_only(self, rng):
        img = random_image(rng, 4, 4)
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1

    def test_crop_outside_raises(self, rng):
        with pytest.raises(GeometryError):
            crop_image(random_image(rng, 10, 10), Rect(5, 5, 11, 9))

    def test_flip_twice_is_identity(self, rng):
        img = random_image(rng, 9, 5)
        assert flip_horizontal(flip_horizontal(img)) == img

    def test_scaled_size_keeps_aspect(self):
        assert scaled_size(512, 384, 256) == (341, 256)
        assert scaled_size(300, 600, 256) == (256, 512)
        assert scaled_size(256, 256, 256) == (256, 256)

    def test_resize_shorter_side(self, rng):
        out = resize_shorter_side(random_image(rng, 200, 100), 50)
        assert out.size == (100, 50)
        assert out.channels == 3

    def test_resize_noop_returns_same_image(self, rng):
        img = random_image(rng, 300, 256)
        assert resize_shorter_side(img, 256) is img

    def test_scale_rect(self):
        assert scale_rect(Rect(10, 10, 20, 20), 2.0, 2.0, 100, 100) == Rect(20, 20, 40, 40)
        assert scale_rect(Rect(40, 40, 50, 50), 3.0, 3.0, 100, 100) is None

    def test_grayscale_buffer(self):
        img = ImageBuffer(np.full((3, 4), 7, dtype=np.uint8))
        assert img.channels == 1
        assert float(img.gray()[0, 0]) == 7.0
