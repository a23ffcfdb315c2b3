"""
Object-centric crop sampler

A fixed s x s crop at top-left (x, y) is drawn with probability proportional
to its pixel overlap with the detected box. For axis-aligned boxes the overlap
factorizes into overlap_x(x) * overlap_y(y), so the 2-D multinomial is two
independent 1-D multinomials sampled by inverse transform over integer
prefix sums. A positive overlap threshold (tau) breaks the factorization; the
distribution then keeps a dense joint prefix-sum table instead.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.geometry import ImageBuffer, Rect, crop_image, flip_horizontal
from utils.errors import SamplingError

logger = logging.getLogger(__name__)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    crop_size: int = Field(224, ge=1)
    tau: int = Field(0, ge=0)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    rng_seed: int = Field(0, ge=0, lt=2 ** 64)

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


@dataclass(frozen=True, eq=False)
class OverlapProfile:
    """Overlap of every crop start position with the object interval along one axis"""
    extent: int
    crop: int
    weights: np.ndarray

    @property
    def positions(self) -> int:
        return self.extent - self.crop + 1


@dataclass(frozen=True, eq=False)
class CropDistribution:
    image_width: int
    image_height: int
    crop_size: int
    x_profile: OverlapProfile
    y_profile: OverlapProfile
    x_cdf: np.ndarray
    y_cdf: np.ndarray
    total_weight: int
    fallback_uniform: bool
    # flattened (y, x) prefix sums, only when tau zeroes part of the joint support
    joint_cdf: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        """(rows, cols) of the position grid: (h - s + 1, w - s + 1)"""
        return (self.y_profile.positions, self.x_profile.positions)


@dataclass(frozen=True)
class CropSample:
    x: int
    y: int
    flipped: bool
    image_id: str = ""

    def rect(self, crop_size: int) -> Rect:
        return Rect.from_size(self.x, self.y, crop_size, crop_size)


def _frozen(values: np.ndarray) -> np.ndarray:
    values.flags.writeable = False
    return values


def overlap_profile(extent: int, crop: int, object_lo: int, object_hi: int) -> OverlapProfile:
    if crop > extent:
        raise SamplingError(f"crop exceeds image: crop {crop} > extent {extent}")
    if crop < 1:
        raise SamplingError(f"crop must be >= 1, got {crop}")
    if not 0 <= object_lo < object_hi <= extent:
        raise SamplingError(f"object interval [{object_lo}, {object_hi}) outside [0, {extent})")
    k = np.arange(extent - crop + 1, dtype=np.int64)
    weights = np.minimum(k + crop, object_hi) - np.maximum(k, object_lo)
    np.maximum(weights, 0, out=weights)
    return OverlapProfile(extent=extent, crop=crop, weights=_frozen(weights))


def _empty_profile(extent: int, crop: int) -> OverlapProfile:
    return OverlapProfile(extent=extent, crop=crop,
                          weights=_frozen(np.zeros(extent - crop + 1, dtype=np.int64)))


def build_crop_distribution(image_w: int, image_h: int, detection: Optional[Rect],
                            cfg: SamplerConfig) -> CropDistribution:
    s = cfg.crop_size
    if s > image_w or s > image_h:
        raise SamplingError(
            f"crop exceeds image: {s}x{s} crop on {image_w}x{image_h} image (resize first)")

    box = detection.clip(image_w, image_h) if detection is not None else None
    if box is None:
        x_profile, y_profile = _empty_profile(image_w, s), _empty_profile(image_h, s)
    else:
        x_profile = overlap_profile(image_w, s, box.x0, box.x1)
        y_profile = overlap_profile(image_h, s, box.y0, box.y1)

    x_cdf = _frozen(np.cumsum(x_profile.weights))
    y_cdf = _frozen(np.cumsum(y_profile.weights))
    joint_cdf = None
    if cfg.tau > 0 and box is not None:
        joint = np.outer(y_profile.weights, x_profile.weights)
        joint[joint < cfg.tau] = 0
        joint_cdf = _frozen(np.cumsum(joint.ravel()))
        total = int(joint_cdf[-1])
    else:
        total = int(x_cdf[-1]) * int(y_cdf[-1])

    if total == 0:
        logger.debug(f"crop distribution on {image_w}x{image_h} degenerates to uniform")
    return CropDistribution(
        image_width=image_w, image_height=image_h, crop_size=s,
        x_profile=x_profile, y_profile=y_profile, x_cdf=x_cdf, y_cdf=y_cdf,
        total_weight=total, fallback_uniform=total == 0, joint_cdf=joint_cdf,
    )


def build_uniform_distribution(image_w: int, image_h: int, cfg: SamplerConfig) -> CropDistribution:
    """Uniform-sampling baseline: every in-bounds crop position equally likely"""
    return build_crop_distribution(image_w, image_h, None, cfg)


def sample_positions(dist: CropDistribution, rng: np.random.Generator,
                     count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draw count crop positions; x values are drawn before y values"""
    rows, cols = dist.shape
    if dist.fallback_uniform:
        xs = rng.integers(0, cols, size=count)
        ys = rng.integers(0, rows, size=count)
    elif dist.joint_cdf is not None:
        u = rng.integers(0, dist.total_weight, size=count)
        flat = np.searchsorted(dist.joint_cdf, u, side="right")
        ys, xs = np.divmod(flat, cols)
    else:
        # smallest k with cdf[k] > u
        ux = rng.integers(0, int(dist.x_cdf[-1]), size=count)
        xs = np.searchsorted(dist.x_cdf, ux, side="right")
        uy = rng.integers(0, int(dist.y_cdf[-1]), size=count)
        ys = np.searchsorted(dist.y_cdf, uy, side="right")
    return xs.astype(np.int64), ys.astype(np.int64)


def sample_position(dist: CropDistribution, rng: np.random.Generator) -> Tuple[int, int]:
    xs, ys = sample_positions(dist, rng, 1)
    return int(xs[0]), int(ys[0])


def sample_training_crops(img: ImageBuffer, dist: CropDistribution, count: int,
                          cfg: SamplerConfig, rng: np.random.Generator,
                          image_id: str = "") -> List[CropSample]:
    if img.size != (dist.image_width, dist.image_height):
        raise SamplingError(
            f"distribution built for {dist.image_width}x{dist.image_height}, "
            f"image is {img.width}x{img.height}")
    if count < 0:
        raise SamplingError(f"crop count must be >= 0, got {count}")
    if count == 0:
        return []
    xs, ys = sample_positions(dist, rng, count)
    flips = rng.random(count) < cfg.flip_probability
    return [CropSample(int(x), int(y), bool(f), image_id) for x, y, f in zip(xs, ys, flips)]


def render_crop(img: ImageBuffer, sample: CropSample, crop_size: int) -> ImageBuffer:
    crop = crop_image(img, sample.rect(crop_size))
    return flip_horizontal(crop) if sample.flipped else crop


def joint_weight_map(dist: CropDistribution) -> np.ndarray:
    """Exact integer weight of every (y, x) position; all ones in fallback mode"""
    rows, cols = dist.shape
    if dist.fallback_uniform:
        return np.ones((rows, cols), dtype=np.int64)
    if dist.joint_cdf is not None:
        return np.diff(dist.joint_cdf, prepend=0).reshape(rows, cols)
    return np.outer(dist.y_profile.weights, dist.x_profile.weights)


def export_probability_map(dist: CropDistribution) -> np.ndarray:
    weights = joint_weight_map(dist)
    return weights / weights.sum(dtype=np.float64)


def probability_map_image(prob_map: np.ndarray) -> ImageBuffer:
    """Grayscale rendering of a probability map, max-normalized to 255"""
    peak = float(prob_map.max())
    if peak <= 0.0:
        return ImageBuffer(np.zeros(prob_map.shape, dtype=np.uint8))
    levels = np.floor(prob_map / peak * 255.0 + 0.5)
    return ImageBuffer(levels.astype(np.uint8))


def derive_worker_seed(base_seed: int, worker_index: int) -> int:
    return base_seed ^ worker_index


def positions_histogram(samples: Sequence[CropSample], dist: CropDistribution) -> np.ndarray:
    """Counts of sampled positions on the (y, x) grid"""
    counts = np.zeros(dist.shape, dtype=np.int64)
    for s in samples:
        counts[s.y, s.x] += 1
    return counts
