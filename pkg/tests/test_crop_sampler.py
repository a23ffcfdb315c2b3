import numpy as np
import pytest
from scipy import stats

from conftest import random_image, random_rect
from services.crop_sampler import (
    SamplerConfig, build_crop_distribution, build_uniform_distribution, derive_worker_seed,
    export_probability_map, joint_weight_map, overlap_profile, positions_histogram,
    probability_map_image, render_crop, sample_position, sample_positions, sample_training_crops,
)
from services.geometry import Rect, crop_image, flip_horizontal, intersect_area
from utils.errors import SamplingError

DRAWS = 1_000_000


def _frequencies(values, n):
    return np.bincount(values, minlength=n) / values.size


class TestOverlapProfile:
    def test_toy_profile(self):
        profile = overlap_profile(6, 4, 2, 5)
        np.testing.assert_array_equal(profile.weights, [2, 3, 3])
        assert profile.positions == 3

    def test_crop_larger_than_extent(self):
        with pytest.raises(SamplingError):
            overlap_profile(4, 5, 0, 4)


class TestToyDistribution:
    cfg = SamplerConfig(crop_size=4)

    def test_analytic_probabilities(self):
        dist = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), self.cfg)
        prob = export_probability_map(dist)
        np.testing.assert_allclose(prob.sum(axis=0), [2 / 8, 3 / 8, 3 / 8])
        np.testing.assert_allclose(prob.sum(axis=1), [1 / 3, 1 / 3, 1 / 3])

    def test_empirical_frequencies(self):
        dist = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), self.cfg)
        xs, ys = sample_positions(dist, np.random.default_rng(0), DRAWS)
        fx, fy = _frequencies(xs, 3), _frequencies(ys, 3)
        assert np.abs(fx - [2 / 8, 3 / 8, 3 / 8]).max() <= 3e-3
        assert np.abs(fy - 1 / 3).max() <= 3e-3
        _, p = stats.chisquare(np.bincount(xs, minlength=3), DRAWS * np.array([2, 3, 3]) / 8)
        assert p > 0.01

    def test_single_draw_lands_on_positive_weight(self):
        dist = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), self.cfg)
        weights = joint_weight_map(dist)
        for seed in range(20):
            x, y = sample_position(dist, np.random.default_rng(seed))
            xs, ys = sample_positions(dist, np.random.default_rng(seed), 1)
            assert (x, y) == (int(xs[0]), int(ys[0]))
            assert weights[y, x] > 0


class TestRealisticDistribution:
    def test_marginals_match_analytic(self):
        cfg = SamplerConfig(crop_size=224)
        dist = build_crop_distribution(341, 256, Rect(100, 40, 260, 200), cfg)
        xs, ys = sample_positions(dist, np.random.default_rng(1), DRAWS)
        rows, cols = dist.shape
        assert (rows, cols) == (33, 118)
        for values, weights in ((xs, dist.x_profile.weights), (ys, dist.y_profile.weights)):
            expected = weights / weights.sum()
            observed = _frequencies(values, expected.size)
            assert np.abs(observed - expected).max() <= 3e-3
            counts = np.bincount(values, minlength=expected.size)
            support = expected > 0
            _, p = stats.chisquare(counts[support], DRAWS * expected[support])
            assert p > 0.01


class TestSeparability:
    def test_joint_map_matches_enumeration(self, rng):
        for _ in range(200):
            width, height = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            crop = int(rng.integers(1, min(width, height) + 1))
            det = random_rect(rng, width, height)
            dist = build_crop_distribution(width, height, det, SamplerConfig(crop_size=crop))
            oracle = np.array([[intersect_area(Rect.from_size(x, y, crop, crop), det)
                                for x in range(width - crop + 1)]
                               for y in range(height - crop + 1)], dtype=np.int64)
            weights = joint_weight_map(dist)
            if oracle.sum() == 0:
                assert dist.fallback_uniform
            else:
                np.testing.assert_array_equal(weights, oracle)


class TestDegenerateCases:
    def test_full_image_detection_is_uniform(self):
        dist = build_crop_distribution(300, 260, Rect(0, 0, 300, 260), SamplerConfig())
        prob = export_probability_map(dist)
        assert not dist.fallback_uniform
        assert np.all(prob == prob[0, 0])

    def test_missing_detection_falls_back(self):
        dist = build_crop_distribution(300, 260, None, SamplerConfig())
        assert dist.fallback_uniform
        prob = export_probability_map(dist)
        assert np.all(prob == prob[0, 0])

    def test_uniform_builder(self):
        assert build_uniform_distribution(250, 250, SamplerConfig()).fallback_uniform

    def test_detection_outside_image_falls_back(self):
        dist = build_crop_distribution(300, 260, Rect(400, 400, 500, 500), SamplerConfig())
        assert dist.fallback_uniform

    def test_crop_exceeds_image(self):
        with pytest.raises(SamplingError):
            build_crop_distribution(200, 300, Rect(0, 0, 10, 10), SamplerConfig(crop_size=224))

    def test_tau_zeroes_low_overlap_positions(self):
        cfg = SamplerConfig(crop_size=4, tau=6)
        dist = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), cfg)
        weights = joint_weight_map(dist)
        # joint weights are 8, 12, 12 on every row; all survive tau=6
        np.testing.assert_array_equal(weights, np.tile([8, 12, 12], (3, 1)))
        strict = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), SamplerConfig(crop_size=4, tau=10))
        np.testing.assert_array_equal(joint_weight_map(strict), np.tile([0, 12, 12], (3, 1)))
        xs, _ = sample_positions(strict, np.random.default_rng(3), 1000)
        assert xs.min() >= 1


class TestTrainingCrops:
    def test_count_bounds_and_determinism(self, rng):
        img = random_image(rng, 40, 30)
        cfg = SamplerConfig(crop_size=16, rng_seed=9)
        dist = build_crop_distribution(40, 30, Rect(10, 5, 30, 25), cfg)
        a = sample_training_crops(img, dist, 50, cfg, cfg.make_rng(), "img")
        b = sample_training_crops(img, dist, 50, cfg, cfg.make_rng(), "img")
        assert a == b
        assert len(a) == 50
        for s in a:
            assert s.rect(16).inside(40, 30)
            assert s.image_id == "img"

    def test_flip_probability_extremes(self, rng):
        img = random_image(rng, 20, 20)
        never = SamplerConfig(crop_size=8, flip_probability=0.0)
        always = SamplerConfig(crop_size=8, flip_probability=1.0)
        dist = build_uniform_distribution(20, 20, never)
        assert not any(s.flipped for s in sample_training_crops(img, dist, 30, never, rng))
        assert all(s.flipped for s in sample_training_crops(img, dist, 30, always, rng))

    def test_render_crop_applies_flip(self, rng):
        img = random_image(rng, 20, 20)
        cfg = SamplerConfig(crop_size=8, flip_probability=1.0)
        dist = build_uniform_distribution(20, 20, cfg)
        sample = sample_training_crops(img, dist, 1, cfg, rng)[0]
        expected = flip_horizontal(crop_image(img, sample.rect(8)))
        assert render_crop(img, sample, 8) == expected

    def test_size_mismatch(self, rng):
        cfg = SamplerConfig(crop_size=8)
        dist = build_uniform_distribution(20, 20, cfg)
        with pytest.raises(SamplingError):
            sample_training_crops(random_image(rng, 21, 20), dist, 1, cfg, rng)

    def test_histogram_counts_every_sample(self, rng):
        img = random_image(rng, 12, 12)
        cfg = SamplerConfig(crop_size=4)
        dist = build_crop_distribution(12, 12, Rect(4, 4, 8, 8), cfg)
        samples = sample_training_crops(img, dist, 100, cfg, rng)
        assert positions_histogram(samples, dist).sum() == 100


class TestProbabilityMapImage:
    def test_peak_is_white(self):
        dist = build_crop_distribution(6, 6, Rect(2, 0, 5, 6), SamplerConfig(crop_size=4))
        img = probability_map_image(export_probability_map(dist))
        assert img.size == (3, 3)
        assert img.channels == 1
        assert int(img.pixels.max()) == 255
        assert int(img.pixels[0, 0, 0]) == 170


def test_worker_seed_derivation():
    assert derive_worker_seed(7, 0) == 7
    assert derive_worker_seed(7, 3) == 4
