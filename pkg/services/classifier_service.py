import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from services.crop_classifier import (
    ClassifierModel, LabeledImage, TrainConfig, TrainingObserver, predict_test_time, train_classifier,
)
from services.crop_sampler import SamplerConfig
from services.geometry import ImageBuffer, Rect
from utils.errors import ConfigurationError
from utils.model_io import load_classifier, save_classifier

logger = logging.getLogger(__name__)


class CropClassifierService:
    def __init__(self, model_path: Optional[Union[str, Path]] = None,
                 train_config: Optional[TrainConfig] = None,
                 sampler_config: Optional[SamplerConfig] = None,
                 model: Optional[ClassifierModel] = None):
        """Crop classifier with its sampling and resize settings; loads model_path when no model is given"""
        self.model_path = model_path
        self.train_config = train_config if train_config is not None else TrainConfig()
        self.sampler_config = sampler_config if sampler_config is not None else SamplerConfig()
        self.model = model
        if self.model is None and self.model_path is not None:
            self.load_model()

    @classmethod
    def train(cls, items: Sequence[LabeledImage], num_classes: int, train_config: TrainConfig,
              sampler_config: SamplerConfig, rng: Optional[np.random.Generator] = None,
              observer: Optional[TrainingObserver] = None) -> "CropClassifierService":
        model = train_classifier(items, num_classes, train_config, sampler_config, rng, observer)
        return cls(train_config=train_config, sampler_config=sampler_config, model=model)

    def load_model(self) -> ClassifierModel:
        self.model = load_classifier(self.model_path)
        logger.info(f"✅ {self.model.num_classes}-class crop classifier loaded: {self.model_path}")
        return self.model

    def save_model(self, path: Union[str, Path]) -> None:
        save_classifier(self._require_model(), path)
        self.model_path = path

    def _require_model(self) -> ClassifierModel:
        if self.model is None:
            raise ConfigurationError("no classifier loaded")
        return self.model

    @property
    def num_classes(self) -> int:
        return self._require_model().num_classes

    def predict(self, img: ImageBuffer, detection: Optional[Rect] = None) -> np.ndarray:
        """Class probabilities from the 10-crop ensemble, 20 crops with a detection"""
        return predict_test_time(self._require_model(), img, detection,
                                 self.sampler_config.crop_size, self.train_config.resize_target)

    def top_classes(self, img: ImageBuffer, detection: Optional[Rect] = None, k: int = 5) -> List[int]:
        """Best k classes, equal probabilities ranking the lower class first"""
        probs = self.predict(img, detection)
        if not 1 <= k <= probs.size:
            raise ConfigurationError(f"k must be in [1, {probs.size}], got {k}")
        return [int(c) for c in np.lexsort((np.arange(probs.size), -probs))[:k]]
