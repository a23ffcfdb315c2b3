import numpy as np
import pytest

from services.box_regressor import (
    RegressionPair, apply_box_regressor, apply_offsets, box_offsets, fit_box_regressor, quantize,
)
from services.geometry import Rect
from services.regionlet_detector import Detection
from utils.errors import RegressionError


class TestOffsets:
    def test_identity_is_zero(self):
        r = Rect(10, 20, 50, 80)
        np.testing.assert_array_equal(box_offsets(r, r), np.zeros(4))

    def test_apply_inverts_offsets(self):
        detected, truth = Rect(10, 10, 50, 40), Rect(14, 6, 62, 46)
        assert apply_offsets(detected, box_offsets(detected, truth), (100, 100)) == truth

    def test_result_stays_inside_image(self):
        out = apply_offsets(Rect(0, 0, 10, 10), [-5.0, -5.0, 3.0, 3.0], (64, 48))
        assert out.inside(64, 48)

    def test_huge_offsets_do_not_overflow(self):
        out = apply_offsets(Rect(5, 5, 15, 15), [0.0, 0.0, 1e6, -1e6], (32, 32))
        assert out.inside(32, 32)
        assert out.height >= 1


class TestFit:
    def _pairs(self, rng, n, weights):
        pairs = []
        for _ in range(n):
            detected = Rect(20, 20, 60, 60)
            feats = np.append(rng.normal(size=2), 1.0)
            dx, dy, dlw, dlh = feats @ weights
            cx, cy = 40 + dx * 40, 40 + dy * 40
            w, h = 40 * np.exp(dlw), 40 * np.exp(dlh)
            truth = Rect(int(round(cx - w / 2)), int(round(cy - h / 2)),
                         int(round(cx + w / 2)), int(round(cy + h / 2)))
            pairs.append(RegressionPair(detected, truth, feats))
        return pairs

    def test_recovers_linear_map(self, rng):
        weights = np.array([[0.05, 0.0, 0.1, 0.0],
                            [0.0, -0.05, 0.0, 0.1],
                            [0.01, 0.02, 0.0, 0.0]])
        model = fit_box_regressor(self._pairs(rng, 400, weights), ridge_lambda=0.0)
        np.testing.assert_allclose(model.weights, weights, atol=0.01)

    def test_weights_are_quantized(self, rng):
        model = fit_box_regressor(self._pairs(rng, 50, np.eye(3, 4) * 0.1), ridge_lambda=1e-3)
        for v in model.weights.ravel():
            assert quantize(v) == v

    def test_too_few_pairs(self, rng):
        with pytest.raises(RegressionError):
            fit_box_regressor(self._pairs(rng, 3, np.zeros((3, 4))), 1.0)

    def test_singular_system_without_ridge(self):
        pairs = [RegressionPair(Rect(0, 0, 10, 10), Rect(1, 1, 11, 11), np.array([1.0, 1.0]))] * 5
        with pytest.raises(RegressionError):
            fit_box_regressor(pairs, 0.0)
        assert fit_box_regressor(pairs, 0.5).dim == 2

    def test_negative_lambda(self):
        with pytest.raises(RegressionError):
            fit_box_regressor([], -1.0)

    def test_apply_to_detection(self, rng):
        weights = np.zeros((3, 4))
        model = fit_box_regressor(self._pairs(rng, 20, weights), 0.0)
        refined = apply_box_regressor(model, Detection(Rect(20, 20, 60, 60), 1.0),
                                      np.array([0.0, 0.0, 1.0]), (100, 100))
        assert refined == Rect(20, 20, 60, 60)
