"""
Desk-scale crop classifier: hand features plus multinomial logistic regression

Training crops come from the crop sampler in one of three modes (uniform over
the image, object-centric multinomial, or uniform inside the detection crop).
Test-time prediction averages five crops and their mirrors from the image and,
when a detection exists, from the detection crop as well.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.box_regressor import quantize
from services.crop_sampler import (
    CropDistribution, CropSample, SamplerConfig, build_crop_distribution,
    build_uniform_distribution, render_crop, sample_training_crops,
)
from services.geometry import ImageBuffer, Rect, crop_image, flip_horizontal, resize_shorter_side, scale_rect
from utils.errors import ConfigurationError, SamplingError
from utils.progress import progress

logger = logging.getLogger(__name__)

BLOCK_SIDE = 16
HIST_BINS = 8
FEATURE_DIM = BLOCK_SIDE * BLOCK_SIDE + 3 * HIST_BINS
RESIZE_TARGET = 256
CROP_SIZE = 224

SamplerMode = Literal["uniform", "multinomial", "detection-crop"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sampler: SamplerMode = "multinomial"
    crops_per_image: int = Field(4, ge=1)
    epochs: int = Field(8, ge=1)
    learning_rate: float = Field(0.5, gt=0.0)
    l2_penalty: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(32, ge=1)
    resize_target: int = Field(RESIZE_TARGET, ge=1)
    rng_seed: int = Field(0, ge=0)


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    """Softmax weights, one row per class, bias in the last column"""
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ConfigurationError(f"classifier weights must be (classes, dims+1), got {self.weights.shape}")

    @classmethod
    def zeros(cls, num_classes: int, dims: int = FEATURE_DIM) -> "ClassifierModel":
        return cls(np.zeros((num_classes, dims + 1), dtype=np.float64))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dims(self) -> int:
        return self.weights.shape[1] - 1

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        return softmax(_logits(self.weights, np.atleast_2d(features)))

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)


@dataclass(frozen=True)
class LabeledImage:
    image: ImageBuffer
    label: int
    detection: Optional[Rect] = None
    image_id: str = ""


class TrainingObserver:
    """Hooks into the training loop; the default does nothing"""

    def on_crops(self, image_id: str, samples: Sequence[CropSample], dist: CropDistribution) -> None:
        pass

    def on_epoch(self, epoch: int, loss: float) -> None:
        pass


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logits(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    return features @ weights[:, :-1].T + weights[:, -1]


def extract_crop_feature(crop: ImageBuffer, crop_size: int = CROP_SIZE) -> np.ndarray:
    """16x16 area-downsampled gray in [0, 1] followed by 3 x 8-bin l1-normalized histograms"""
    if crop.size != (crop_size, crop_size):
        raise SamplingError(f"crop must be {crop_size}x{crop_size}, got {crop.width}x{crop.height}")
    block = cv2.resize(crop.gray(), (BLOCK_SIDE, BLOCK_SIDE), interpolation=cv2.INTER_AREA) / 255.0
    pixels = crop.pixels if crop.channels == 3 else np.repeat(crop.pixels, 3, axis=2)
    bins = (pixels >> 5).astype(np.int64) + np.arange(3, dtype=np.int64) * HIST_BINS
    hist = np.bincount(bins.ravel(), minlength=3 * HIST_BINS).astype(np.float64)
    hist /= crop.width * crop.height
    return np.concatenate([block.ravel(), hist])


def _prepare_source(item: LabeledImage, cfg: TrainConfig,
                    sampler_cfg: SamplerConfig) -> Tuple[ImageBuffer, CropDistribution]:
    """Resized training image and the crop distribution over it"""
    img = item.image
    if cfg.sampler == "detection-crop" and item.detection is not None:
        box = item.detection.clip(img.width, img.height)
        if box is not None:
            source = resize_shorter_side(crop_image(img, box), cfg.resize_target)
            return source, build_uniform_distribution(source.width, source.height, sampler_cfg)

    source = resize_shorter_side(img, cfg.resize_target)
    if cfg.sampler == "uniform":
        return source, build_uniform_distribution(source.width, source.height, sampler_cfg)
    mapped = None
    if item.detection is not None:
        mapped = scale_rect(item.detection, source.width / img.width, source.height / img.height,
                            source.width, source.height)
    if mapped is None:
        logger.warning(f"⚠️ no detection for {item.image_id or 'image'}, falling back to uniform sampling")
    return source, build_crop_distribution(source.width, source.height, mapped, sampler_cfg)


def regularized_loss(weights: np.ndarray, features: np.ndarray, labels: np.ndarray,
                     l2_penalty: float) -> float:
    probs = softmax(_logits(weights, features))
    nll = -np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300)).mean()
    return float(nll + 0.5 * l2_penalty * np.sum(weights[:, :-1] ** 2))


def sgd_epoch(weights: np.ndarray, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
              rng: np.random.Generator) -> np.ndarray:
    """One shuffled pass of mini-batch gradient steps; returns the updated weights"""
    order = rng.permutation(labels.size)
    for start in range(0, order.size, cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        X, y = features[batch], labels[batch]
        residual = softmax(_logits(weights, X))
        residual[np.arange(y.size), y] -= 1.0
        grad = np.empty_like(weights)
        grad[:, :-1] = residual.T @ X / y.size + cfg.l2_penalty * weights[:, :-1]
        grad[:, -1] = residual.mean(axis=0)
        weights = weights - cfg.learning_rate * grad
    return weights


def train_classifier(items: Sequence[LabeledImage], num_classes: int, cfg: TrainConfig,
                     sampler_cfg: SamplerConfig, rng: Optional[np.random.Generator] = None,
                     observer: Optional[TrainingObserver] = None) -> ClassifierModel:
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    observer = observer or TrainingObserver()
    if not items:
        raise ConfigurationError("no training images")
    for item in items:
        if not 0 <= item.label < num_classes:
            raise ConfigurationError(f"{item.image_id}: label {item.label} outside {num_classes} classes")

    logger.info(f"🔄 preparing {len(items)} training images for {cfg.sampler} sampling")
    sources = [_prepare_source(item, cfg, sampler_cfg) for item in progress(items, desc="resize")]
    weights = np.zeros((num_classes, FEATURE_DIM + 1), dtype=np.float64)

    for epoch in progress(range(cfg.epochs), desc=f"{cfg.sampler} epochs"):
        feats, labels = [], []
        for item, (source, dist) in zip(items, sources):
            samples = sample_training_crops(source, dist, cfg.crops_per_image, sampler_cfg, rng, item.image_id)
            observer.on_crops(item.image_id, samples, dist)
            for sample in samples:
                feats.append(extract_crop_feature(render_crop(source, sample, sampler_cfg.crop_size),
                                                   sampler_cfg.crop_size))
                labels.append(item.label)
        X = np.stack(feats)
        y = np.asarray(labels, dtype=np.int64)
        weights = sgd_epoch(weights, X, y, cfg, rng)
        loss = regularized_loss(weights, X, y, cfg.l2_penalty)
        observer.on_epoch(epoch, loss)
        logger.debug(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.6f}")

    weights = np.vectorize(quantize, otypes=[np.float64])(weights)
    logger.info(f"✅ {cfg.sampler} classifier trained: {num_classes} classes, {cfg.epochs} epochs")
    return ClassifierModel(weights)


def five_crops(img: ImageBuffer, crop_size: int) -> List[Rect]:
    """Four corners then the center"""
    if crop_size > img.width or crop_size > img.height:
        raise SamplingError(f"crop exceeds image: {crop_size} on {img.width}x{img.height}")
    right, bottom = img.width - crop_size, img.height - crop_size
    origins = [(0, 0), (right, 0), (0, bottom), (right, bottom), (right // 2, bottom // 2)]
    return [Rect.from_size(x, y, crop_size, crop_size) for x, y in origins]


def ensemble_crops(img: ImageBuffer, detection: Optional[Rect], crop_size: int = CROP_SIZE,
                    resize_target: int = RESIZE_TARGET) -> List[ImageBuffer]:
    """Five crops plus mirrors of the resized image, then of the detection crop if any"""
    sources = [resize_shorter_side(img, resize_target)]
    box = detection.clip(img.width, img.height) if detection is not None else None
    if box is not None:
        sources.append(resize_shorter_side(crop_image(img, box), resize_target))
    crops = []
    for source in sources:
        for rect in five_crops(source, crop_size):
            crop = crop_image(source, rect)
            crops.extend((crop, flip_horizontal(crop)))
    return crops


def average_probabilities(probs: np.ndarray) -> np.ndarray:
    """Column means with exactly rounded sums, independent of row order"""
    return np.array([math.fsum(col) for col in probs.T]) / probs.shape[0]


def predict_test_time(model: ClassifierModel, img: ImageBuffer, detection: Optional[Rect],
                      crop_size: int = CROP_SIZE, resize_target: int = RESIZE_TARGET) -> np.ndarray:
    crops = ensemble_crops(img, detection, crop_size, resize_target)
    features = np.stack([extract_crop_feature(c, crop_size) for c in crops])
    return average_probabilities(model.probabilities(features))


def topk_accuracy(predictions: np.ndarray, labels: Sequence[int], k: int) -> float:
    """Fraction whose label ranks within the top k; equal scores rank the lower class first"""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1 or k > predictions.shape[1]:
        raise ConfigurationError(f"k must be in [1, {predictions.shape[1]}], got {k}")
    if labels.size == 0:
        return 0.0
    true_scores = predictions[np.arange(labels.size), labels][:, np.newaxis]
    classes = np.arange(predictions.shape[1])[np.newaxis, :]
    ahead = (predictions > true_scores) | ((predictions == true_scores) & (classes < labels[:, np.newaxis]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))
