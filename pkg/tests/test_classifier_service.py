import numpy as np
import pytest

from conftest import solid_image
from services.classifier_service import CropClassifierService
from services.crop_classifier import ClassifierModel, LabeledImage, TrainConfig
from services.crop_sampler import SamplerConfig
from services.geometry import Rect
from utils.errors import ConfigurationError

SAMPLER = SamplerConfig(crop_size=64)
TRAIN = TrainConfig(sampler="uniform", crops_per_image=2, epochs=5, learning_rate=0.05,
                    resize_target=80, rng_seed=1)
RED, BLUE = (230, 30, 30), (30, 30, 230)


@pytest.fixture(scope="module")
def classifier():
    items = [LabeledImage(solid_image(96, 96, RED if i % 2 == 0 else BLUE), i % 2, image_id=f"im{i}")
             for i in range(6)]
    return CropClassifierService.train(items, 2, TRAIN, SAMPLER)


class TestPredict:
    def test_probabilities(self, classifier):
        probs = classifier.predict(solid_image(96, 96, RED))
        assert probs.shape == (2,)
        assert probs.sum() == pytest.approx(1.0)
        assert probs.argmax() == 0

    def test_with_detection(self, classifier):
        probs = classifier.predict(solid_image(120, 96, BLUE), Rect(10, 10, 90, 80))
        assert probs.sum() == pytest.approx(1.0)
        assert probs.argmax() == 1

    def test_top_classes(self, classifier):
        assert classifier.top_classes(solid_image(96, 96, BLUE), k=2) == [1, 0]
        with pytest.raises(ConfigurationError):
            classifier.top_classes(solid_image(96, 96, BLUE), k=3)

    def test_ties_rank_lower_class_first(self):
        service = CropClassifierService(train_config=TRAIN, sampler_config=SAMPLER,
                                        model=ClassifierModel.zeros(4))
        assert service.top_classes(solid_image(96, 96), k=3) == [0, 1, 2]


class TestModelFile:
    def test_save_and_load(self, classifier, tmp_path):
        path = tmp_path / "classifier.txt"
        classifier.save_model(path)
        loaded = CropClassifierService(path, TRAIN, SAMPLER)
        assert loaded.num_classes == 2
        np.testing.assert_allclose(loaded.model.weights, classifier.model.weights, rtol=1e-8)

    def test_missing_model(self):
        with pytest.raises(ConfigurationError):
            CropClassifierService().predict(solid_image(96, 96))
