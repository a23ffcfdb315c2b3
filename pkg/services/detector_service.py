import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from services.cascade_trainer import TrainingImage, train_cascade
from services.geometry import ImageBuffer, Rect
from services.regionlet_detector import (
    LOCALIZATION_DIM, CascadeModel, Detection, DetectorConfig, detect_image, generate_proposals,
)
from utils.errors import DetectionError, ModelFormatError
from utils.model_io import load_cascade, save_cascade

logger = logging.getLogger(__name__)


class RegionletDetector:
    def __init__(self, model_path: Optional[Union[str, Path]] = None,
                 config: Optional[DetectorConfig] = None, model: Optional[CascadeModel] = None):
        """Salient-object detector around a trained cascade; loads model_path when no model is given"""
        self.model_path = model_path
        self.config = config if config is not None else DetectorConfig()
        self.model = model
        if self.model is None and self.model_path is not None:
            self.load_model()

    @classmethod
    def train(cls, images: Sequence[TrainingImage], config: DetectorConfig,
              rng: Optional[np.random.Generator] = None) -> "RegionletDetector":
        return cls(config=config, model=train_cascade(images, config, rng))

    def load_model(self) -> CascadeModel:
        model = load_cascade(self.model_path)
        if model.regressor is not None and model.regressor.dim != LOCALIZATION_DIM:
            raise ModelFormatError(f"{self.model_path}: regressor has {model.regressor.dim} rows, "
                                   f"expected {LOCALIZATION_DIM}")
        self.model = model
        return model

    def save_model(self, path: Union[str, Path]) -> None:
        save_cascade(self._require_model(), path)
        self.model_path = path

    def _require_model(self) -> CascadeModel:
        if self.model is None:
            raise DetectionError("no cascade loaded")
        return self.model

    def proposals(self, img: ImageBuffer) -> List[Rect]:
        return generate_proposals(img, self.config)

    def detect(self, img: ImageBuffer, relocalize: bool = True) -> Detection:
        """
        Max-response detection of the salient object
        Raises DetectionError when the image is too small for any proposal
        """
        return detect_image(self._require_model(), img, self.config, relocalize)

    def detect_best(self, img: ImageBuffer, relocalize: bool = True,
                    image_id: str = "") -> Optional[Detection]:
        """The detection, or None when the image yields none"""
        try:
            return self.detect(img, relocalize)
        except DetectionError as e:
            logger.warning(f"⚠️ no detection for {image_id or 'image'}: {e}")
            return None
