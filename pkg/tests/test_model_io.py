import numpy as np
import pytest

from services.box_regressor import BoxRegressor, quantize
from services.crop_classifier import ClassifierModel
from services.regionlet_detector import (
    FEATURE_LOG_AREA, FEATURE_MEAN_INTENSITY, CascadeModel, CascadeStage, RegionletSpec, WeakClassifier,
)
from utils.errors import ModelFormatError
from utils.model_io import (
    format_cascade, format_classifier, load_cascade, load_classifier, parse_cascade,
    parse_classifier, save_cascade, save_classifier,
)


def _random_cascade(rng):
    stages = []
    for _ in range(3):
        weak = []
        for _ in range(4):
            regionlets = []
            for _ in range(int(rng.integers(1, 4))):
                x0, y0 = quantize(rng.uniform(0, 0.5)), quantize(rng.uniform(0, 0.5))
                regionlets.append(RegionletSpec(x0, y0, quantize(x0 + 0.4), quantize(y0 + 0.3),
                                                FEATURE_MEAN_INTENSITY, int(rng.integers(0, 3))))
            alpha = quantize(rng.uniform(0.1, 2.0))
            weak.append(WeakClassifier(tuple(regionlets), quantize(rng.normal()), alpha, -alpha))
        stages.append(CascadeStage(tuple(weak), quantize(rng.normal() * 3)))
    regressor = BoxRegressor(np.vectorize(quantize)(rng.normal(size=(7, 4))), 1e-3)
    return CascadeModel(stages=tuple(stages), metadata={"seed": "5", "images": "12"},
                        regressor=regressor)


class TestCascadeFormat:
    def test_round_trip_is_exact(self, rng, tmp_path):
        model = _random_cascade(rng)
        save_cascade(model, tmp_path / "m" / "cascade.txt")
        loaded = load_cascade(tmp_path / "m" / "cascade.txt")
        assert loaded == model
        assert loaded.metadata == model.metadata
        np.testing.assert_array_equal(loaded.regressor.weights, model.regressor.weights)
        assert loaded.regressor.ridge_lambda == 1e-3
        assert format_cascade(loaded) == format_cascade(model)

    def test_without_regressor(self):
        weak = WeakClassifier((RegionletSpec(0.0, 0.0, 1.0, 1.0, FEATURE_LOG_AREA),), 5.5, 1.0, -1.0)
        model = CascadeModel(stages=(CascadeStage((weak,), -0.5),))
        loaded = parse_cascade(format_cascade(model))
        assert loaded == model
        assert loaded.regressor is None

    def test_header_and_terminator(self, rng):
        text = format_cascade(_random_cascade(rng))
        assert text.startswith("OCSCASCADE v1\nfeatures\t")
        assert text.endswith("end\n")

    def test_weak_lines_carry_their_stage(self, rng):
        lines = format_cascade(_random_cascade(rng)).splitlines()
        stages = [line.split("\t")[1] for line in lines if line.startswith("weak\t")]
        assert stages == ["0"] * 4 + ["1"] * 4 + ["2"] * 4

    def test_weak_line_under_wrong_stage(self, rng):
        lines = format_cascade(_random_cascade(rng)).splitlines()
        first = next(i for i, line in enumerate(lines) if line.startswith("weak\t"))
        lines[first] = lines[first].replace("weak\t0\t", "weak\t1\t", 1)
        with pytest.raises(ModelFormatError):
            parse_cascade("\n".join(lines) + "\n")

    def test_truncated_file(self, rng):
        text = format_cascade(_random_cascade(rng))
        with pytest.raises(ModelFormatError):
            parse_cascade(text[: len(text) // 2])

    def test_wrong_feature_pool(self, rng):
        text = format_cascade(_random_cascade(rng)).replace("log_area", "haar")
        with pytest.raises(ModelFormatError):
            parse_cascade(text)

    def test_trailing_content(self, rng):
        with pytest.raises(ModelFormatError):
            parse_cascade(format_cascade(_random_cascade(rng)) + "extra\n")


class TestClassifierFormat:
    def test_round_trip_is_exact(self, rng, tmp_path):
        model = ClassifierModel(np.vectorize(quantize)(rng.normal(size=(4, 281))))
        save_classifier(model, tmp_path / "cls.txt")
        assert load_classifier(tmp_path / "cls.txt") == model

    def test_header(self):
        text = format_classifier(ClassifierModel.zeros(3, 2))
        assert text.splitlines()[0] == "OCSCLS v1 3 2"
        assert len(text.splitlines()) == 4

    def test_row_count_mismatch(self):
        with pytest.raises(ModelFormatError):
            parse_classifier("OCSCLS v1 2 1\n0 0\n")

    def test_row_width_mismatch(self):
        with pytest.raises(ModelFormatError):
            parse_classifier("OCSCLS v1 1 2\n0 0\n")
