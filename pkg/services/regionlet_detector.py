"""
Scale-aware boosted cascade detector

Features are read on the unwarped window: every regionlet rect is defined
relative to the window, so the same model runs on any window size and the
score keeps absolute scale information (the gradient-energy and log-area
features are not normalized by scale). Detection keeps only the single
proposal with the maximum response instead of running NMS, then re-localizes
it: the densest block of fine texture around the winning window gives the
box offsets that the ridge regressor turns into the final rect.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.box_regressor import BoxRegressor, apply_box_regressor, box_offsets, quantize
from services.geometry import ImageBuffer, IntegralImage, Rect, integral_table
from utils.errors import DetectionError, GeometryError

logger = logging.getLogger(__name__)

FEATURE_MEAN_INTENSITY = 0
FEATURE_HORIZONTAL_ENERGY = 1
FEATURE_VERTICAL_ENERGY = 2
FEATURE_LOG_AREA = 3
FEATURE_POOL = ("mean_intensity", "horizontal_energy", "vertical_energy", "log_area")

# planes of the stacked summed-area table: three color planes, |dx|, |dy|, texture mask
_PLANE_HORIZONTAL = 3
_PLANE_VERTICAL = 4
_PLANE_TEXTURE = 5
_NUM_PLANES = 6

# per-channel second-difference magnitude above which a pixel counts as textured
TEXTURE_LEVEL = 4
LOCALIZATION_DIM = 5


class DetectorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    min_window: int = Field(16, ge=1)
    proposal_scales: Tuple[float, ...] = (1.0, 0.8, 0.64, 0.512, 0.41)
    proposal_aspects: Tuple[float, ...] = (1.0, 4.0 / 3.0, 3.0 / 4.0)
    stride_fraction: float = Field(0.25, gt=0.0, le=1.0)

    num_stages: int = Field(4, ge=1)
    weak_per_stage: int = Field(50, ge=1)
    candidates_per_round: int = Field(500, ge=1)
    max_regionlets: int = Field(3, ge=1, le=3)
    min_regionlet_fraction: float = Field(0.125, gt=0.0, le=1.0)
    stage_margin: float = Field(0.99, gt=0.0, le=1.0)
    negatives_per_stage: int = Field(2000, ge=1)
    monotone_scale: bool = True

    positive_overlap: float = Field(0.70, ge=0.0, le=1.0)
    negative_overlap: float = Field(0.30, ge=0.0, le=1.0)
    partition_measure: Literal["iou", "iogt"] = "iou"

    cascade_fast_path: bool = False
    use_regressor: bool = True
    ridge_lambda: float = Field(1e-3, ge=0.0)
    relocalize_context: float = Field(0.5, ge=0.0)
    texture_density: float = Field(0.7, gt=0.0, lt=1.0)
    relocalize_grid: int = Field(48, ge=2)
    rng_seed: int = Field(0, ge=0)

    @field_validator("proposal_scales", "proposal_aspects")
    @classmethod
    def _positive(cls, values):
        if not values or any(v <= 0 for v in values):
            raise ValueError("must be a non-empty list of positive numbers")
        return tuple(float(v) for v in values)


@dataclass(frozen=True)
class RegionletSpec:
    """Feature region in window-relative coordinates"""
    rx0: float
    ry0: float
    rx1: float
    ry1: float
    feature_id: int
    channel: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rx0 < self.rx1 <= 1.0 and 0.0 <= self.ry0 < self.ry1 <= 1.0):
            raise GeometryError(f"regionlet coordinates out of order or range: {self}")
        if not 0 <= self.feature_id < len(FEATURE_POOL):
            raise GeometryError(f"unknown feature id {self.feature_id}")
        if not 0 <= self.channel < 3:
            raise GeometryError(f"channel must be 0..2, got {self.channel}")

    def absolute_rect(self, window: Rect) -> Rect:
        x0, x1 = _scale_span(window.x0, window.x1, self.rx0, self.rx1)
        y0, y1 = _scale_span(window.y0, window.y1, self.ry0, self.ry1)
        return Rect(int(x0), int(y0), int(x1), int(y1))


@dataclass(frozen=True)
class WeakClassifier:
    regionlets: Tuple[RegionletSpec, ...]
    threshold: float
    alpha_plus: float
    alpha_minus: float

    def __post_init__(self):
        if not 1 <= len(self.regionlets) <= 3:
            raise GeometryError(f"weak classifier needs 1-3 regionlets, got {len(self.regionlets)}")
        if self.alpha_plus == self.alpha_minus:
            raise GeometryError("degenerate stump: alpha_plus == alpha_minus")

    def output(self, values: np.ndarray) -> np.ndarray:
        return np.where(values > self.threshold, self.alpha_plus, self.alpha_minus)


@dataclass(frozen=True)
class CascadeStage:
    weak: Tuple[WeakClassifier, ...]
    rejection_threshold: float


@dataclass(frozen=True)
class CascadeModel:
    stages: Tuple[CascadeStage, ...] = ()
    feature_pool: Tuple[str, ...] = FEATURE_POOL
    metadata: Dict[str, str] = field(default_factory=dict, compare=False)
    regressor: Optional[BoxRegressor] = field(default=None, compare=False)

    @property
    def num_weak(self) -> int:
        return sum(len(s.weak) for s in self.stages)

    def weak_classifiers(self) -> List[WeakClassifier]:
        return [w for s in self.stages for w in s.weak]


@dataclass(frozen=True)
class Detection:
    rect: Rect
    score: float


def _round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def _scale_span(lo, hi, r0, r1):
    """Relative span [r0, r1) of [lo, hi), at least one pixel, kept inside [lo, hi)"""
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    extent = hi - lo
    a0 = lo + _round_half_up(r0 * extent)
    a1 = lo + _round_half_up(r1 * extent)
    a1 = np.minimum(np.maximum(a1, a0 + 1), hi)
    a0 = np.minimum(a0, a1 - 1)
    return a0, a1


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """Per-image summed-area tables backing every feature in the pool"""
    table: np.ndarray     # (h+1, w+1, 6), int32 when it fits
    channels: int

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    def intensity(self) -> IntegralImage:
        return IntegralImage(self.table[:, :, :self.channels])

    def texture(self) -> np.ndarray:
        return self.table[:, :, _PLANE_TEXTURE].astype(np.int64)


def texture_mask(intensity_sum: np.ndarray, channels: int) -> np.ndarray:
    """1 where |d2/dx2| + |d2/dy2| of the channel sum exceeds TEXTURE_LEVEL per channel

    Smooth shading and flat fills stay 0; pixel noise and stripes light up.
    Borders repeat the edge pixel.
    """
    padded = np.pad(intensity_sum, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    lxx = padded[1:-1, 2:] - 2 * center + padded[1:-1, :-2]
    lyy = padded[2:, 1:-1] - 2 * center + padded[:-2, 1:-1]
    return (np.abs(lxx) + np.abs(lyy) > TEXTURE_LEVEL * channels).astype(np.int64)


def prepare_features(img: ImageBuffer) -> FeatureMaps:
    pixels = img.pixels.astype(np.int64)
    color = pixels if img.channels == 3 else np.repeat(pixels, 3, axis=2)
    intensity_sum = pixels.sum(axis=2)
    planes = np.zeros((img.height, img.width, _NUM_PLANES), dtype=np.int64)
    planes[:, :, :3] = color
    planes[:, :-1, _PLANE_HORIZONTAL] = np.abs(np.diff(intensity_sum, axis=1))
    planes[:-1, :, _PLANE_VERTICAL] = np.abs(np.diff(intensity_sum, axis=0))
    planes[:, :, _PLANE_TEXTURE] = texture_mask(intensity_sum, img.channels)
    table = integral_table(planes)
    # corner sums are the largest entries; int32 halves the memory of big training atlases
    if int(table[-1, -1].max()) < 2 ** 31:
        table = table.astype(np.int32)
    return FeatureMaps(table=table, channels=img.channels)


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Windows over one or more images of a FeatureAtlas, as parallel arrays"""
    image_index: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    y1: np.ndarray

    @classmethod
    def from_rects(cls, rects: Sequence[Rect], image_index: Union[int, Sequence[int]] = 0) -> "WindowBatch":
        coords = np.array([r.as_tuple() for r in rects], dtype=np.int64).reshape(-1, 4)
        idx = np.broadcast_to(np.asarray(image_index, dtype=np.int64), (coords.shape[0],)).copy()
        return cls(idx, coords[:, 0], coords[:, 1], coords[:, 2], coords[:, 3])

    @classmethod
    def concat(cls, batches: Sequence["WindowBatch"]) -> "WindowBatch":
        if not batches:
            return cls.from_rects([])
        return cls(*(np.concatenate([getattr(b, name) for b in batches])
                     for name in ("image_index", "x0", "y0", "x1", "y1")))

    def __len__(self) -> int:
        return int(self.x0.shape[0])

    def subset(self, mask_or_index) -> "WindowBatch":
        return WindowBatch(self.image_index[mask_or_index], self.x0[mask_or_index],
                           self.y0[mask_or_index], self.x1[mask_or_index], self.y1[mask_or_index])

    def rect(self, i: int) -> Rect:
        return Rect(int(self.x0[i]), int(self.y0[i]), int(self.x1[i]), int(self.y1[i]))


class FeatureAtlas:
    """Summed-area tables of several images flattened into one array for batched lookups"""

    def __init__(self, maps: Sequence[FeatureMaps]):
        if not maps:
            raise DetectionError("feature atlas needs at least one image")
        if len(maps) == 1:
            self._flat = maps[0].table.reshape(-1)
        else:
            self._flat = np.concatenate([m.table.reshape(-1) for m in maps])
        sizes = np.array([m.table.size for m in maps], dtype=np.int64)
        self._offset = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._row_stride = np.array([(m.width + 1) * _NUM_PLANES for m in maps], dtype=np.int64)
        self._channels = np.array([m.channels for m in maps], dtype=np.int64)
        self._sizes = [(m.width, m.height) for m in maps]

    def __len__(self) -> int:
        return len(self._sizes)

    def image_size(self, index: int) -> Tuple[int, int]:
        return self._sizes[index]

    def _region_sum(self, batch: WindowBatch, x0, y0, x1, y1, plane) -> np.ndarray:
        base = self._offset[batch.image_index] + plane
        stride = self._row_stride[batch.image_index]
        t = self._flat
        return (t[base + y1 * stride + x1 * _NUM_PLANES]
                - t[base + y0 * stride + x1 * _NUM_PLANES]
                - t[base + y1 * stride + x0 * _NUM_PLANES]
                + t[base + y0 * stride + x0 * _NUM_PLANES])

    def regionlet_values(self, spec: RegionletSpec, batch: WindowBatch) -> np.ndarray:
        if spec.feature_id == FEATURE_LOG_AREA:
            area = (batch.x1 - batch.x0) * (batch.y1 - batch.y0)
            return np.log(area.astype(np.float64))
        x0, x1 = _scale_span(batch.x0, batch.x1, spec.rx0, spec.rx1)
        y0, y1 = _scale_span(batch.y0, batch.y1, spec.ry0, spec.ry1)
        area = ((x1 - x0) * (y1 - y0)).astype(np.float64)
        if spec.feature_id == FEATURE_MEAN_INTENSITY:
            channels = self._channels[batch.image_index]
            plane = np.where(channels == 3, spec.channel, 0)
            return self._region_sum(batch, x0, y0, x1, y1, plane) / (area * 255.0)
        plane = _PLANE_HORIZONTAL if spec.feature_id == FEATURE_HORIZONTAL_ENERGY else _PLANE_VERTICAL
        channels = self._channels[batch.image_index].astype(np.float64)
        return self._region_sum(batch, x0, y0, x1, y1, plane) / (area * channels)

    def weak_values(self, weak_or_set, batch: WindowBatch) -> np.ndarray:
        regionlets = weak_or_set.regionlets if isinstance(weak_or_set, WeakClassifier) else weak_or_set
        values = self.regionlet_values(regionlets[0], batch)
        for spec in regionlets[1:]:
            values = np.maximum(values, self.regionlet_values(spec, batch))
        return values

    def texture_table(self, image: int) -> np.ndarray:
        """(h+1, w+1) summed-area table of one image's texture mask"""
        w, h = self._sizes[image]
        table = self._flat[self._offset[image]:self._offset[image] + (w + 1) * (h + 1) * _NUM_PLANES]
        return table.reshape(h + 1, w + 1, _NUM_PLANES)[:, :, _PLANE_TEXTURE].astype(np.int64)


def extract_feature(img: ImageBuffer, maps: FeatureMaps, window: Rect,
                    spec: Union[RegionletSpec, Sequence[RegionletSpec]]) -> float:
    """Feature of one window; a regionlet set yields the max over its members"""
    if not window.inside(img.width, img.height):
        raise GeometryError(f"window {window.as_tuple()} leaves the image")
    members = (spec,) if isinstance(spec, RegionletSpec) else tuple(spec)
    atlas = FeatureAtlas([maps])
    return float(atlas.weak_values(members, WindowBatch.from_rects([window]))[0])


def score_windows(model: CascadeModel, atlas: FeatureAtlas, batch: WindowBatch,
                  early_reject: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Running cascade scores and the first failing stage per window (-1 when none)"""
    n = len(batch)
    scores = np.zeros(n, dtype=np.float64)
    rejected_at = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    for stage_index, stage in enumerate(model.stages):
        if active.size == 0:
            break
        sub = batch.subset(active)
        running = scores[active]
        for weak in stage.weak:
            running = running + weak.output(atlas.weak_values(weak, sub))
        scores[active] = running
        failed = running < stage.rejection_threshold
        newly = active[failed & (rejected_at[active] < 0)]
        rejected_at[newly] = stage_index
        if early_reject:
            active = active[~failed]
    return scores, rejected_at


def score_window(model: CascadeModel, img: ImageBuffer, maps: FeatureMaps, window: Rect,
                 early_reject: bool = True) -> Tuple[float, Optional[int]]:
    if not window.inside(img.width, img.height):
        raise GeometryError(f"window {window.as_tuple()} leaves the image")
    scores, rejected = score_windows(model, FeatureAtlas([maps]),
                                     WindowBatch.from_rects([window]), early_reject)
    stage = int(rejected[0])
    return float(scores[0]), (stage if stage >= 0 else None)


def generate_proposals(img: ImageBuffer, cfg: DetectorConfig) -> List[Rect]:
    """Multi-scale, multi-aspect sliding grid, always led by the full-image window"""
    width, height = img.size
    if width < cfg.min_window or height < cfg.min_window:
        return []
    short = min(width, height)
    seen: Dict[Rect, None] = {Rect(0, 0, width, height): None}
    for scale in cfg.proposal_scales:
        side = int(_round_half_up(scale * short))
        for aspect in cfg.proposal_aspects:
            if aspect >= 1.0:
                win_w, win_h = side, int(_round_half_up(side / aspect))
            else:
                win_w, win_h = int(_round_half_up(side * aspect)), side
            if min(win_w, win_h) < cfg.min_window or win_w > width or win_h > height:
                continue
            for y in _grid_positions(height, win_h, cfg.stride_fraction):
                for x in _grid_positions(width, win_w, cfg.stride_fraction):
                    seen.setdefault(Rect(x, y, x + win_w, y + win_h), None)
    return list(seen)


def _grid_positions(extent: int, window: int, stride_fraction: float) -> List[int]:
    stride = max(1, int(_round_half_up(stride_fraction * window)))
    last = extent - window
    positions = list(range(0, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def _rank_best(scores: np.ndarray, rejected_at: np.ndarray, num_stages: int,
               fast_path: bool) -> int:
    if not fast_path:
        return int(np.argmax(scores))
    passed = np.where(rejected_at < 0, num_stages, rejected_at)
    order = np.lexsort((np.arange(scores.size), -scores, -passed))
    return int(order[0])


def detect_max(model: CascadeModel, img: ImageBuffer, proposals: Sequence[Rect],
               maps: Optional[FeatureMaps] = None, fast_path: bool = False) -> Detection:
    """Single max-response detection over all proposals, ties to the lowest index"""
    if not proposals:
        raise DetectionError("no proposals")
    maps = maps if maps is not None else prepare_features(img)
    batch = WindowBatch.from_rects(proposals)
    scores, rejected = score_windows(model, FeatureAtlas([maps]), batch, early_reject=fast_path)
    best = _rank_best(scores, rejected, len(model.stages), fast_path)
    return Detection(rect=proposals[best], score=float(scores[best]))


def _texture_mass(texture: np.ndarray, density: float, x0, y0, x1, y1):
    """Textured pixels minus density x area; any coordinate may be an array"""
    return (texture[y1, x1] - texture[y0, x1] - texture[y1, x0] + texture[y0, x0]
            - density * (np.asarray(x1) - x0) * (np.asarray(y1) - y0))


def _polish_sides(texture: np.ndarray, box: Tuple[int, int, int, int], span: int,
                  density: float, passes: int = 2) -> Rect:
    """Move each side to its best pixel within span, the other three held fixed"""
    height, width = texture.shape[0] - 1, texture.shape[1] - 1
    x0, y0, x1, y1 = box
    for _ in range(passes):
        c = np.arange(max(0, x0 - span), min(x1 - 1, x0 + span) + 1)
        x0 = int(c[np.argmax(_texture_mass(texture, density, c, y0, x1, y1))])
        c = np.arange(max(x0 + 1, x1 - span), min(width, x1 + span) + 1)
        x1 = int(c[np.argmax(_texture_mass(texture, density, x0, y0, c, y1))])
        c = np.arange(max(0, y0 - span), min(y1 - 1, y0 + span) + 1)
        y0 = int(c[np.argmax(_texture_mass(texture, density, x0, c, x1, y1))])
        c = np.arange(max(y0 + 1, y1 - span), min(height, y1 + span) + 1)
        y1 = int(c[np.argmax(_texture_mass(texture, density, x0, y0, x1, c))])
    return Rect(x0, y0, x1, y1)


def dense_texture_box(texture: np.ndarray, window: Rect, cfg: DetectorConfig) -> Optional[Rect]:
    """Rect near window maximizing textured pixels minus texture_density x area

    Exhaustive search over a coarse grid laid on the window grown by
    relocalize_context on every side, then each side polished to the pixel.
    None when no rect has positive mass.
    """
    height, width = texture.shape[0] - 1, texture.shape[1] - 1
    pad_x = int(_round_half_up(cfg.relocalize_context * window.width))
    pad_y = int(_round_half_up(cfg.relocalize_context * window.height))
    region = Rect(window.x0 - pad_x, window.y0 - pad_y,
                  window.x1 + pad_x, window.y1 + pad_y).clip(width, height)
    nx, ny = min(cfg.relocalize_grid, region.width), min(cfg.relocalize_grid, region.height)
    xs = region.x0 + _round_half_up(np.arange(nx + 1) * (region.width / nx))
    ys = region.y0 + _round_half_up(np.arange(ny + 1) * (region.height / ny))

    # prefix[i, j]: mass of [0, xs[j]) x [0, ys[i])
    prefix = texture[np.ix_(ys, xs)] - cfg.texture_density * np.outer(ys, xs)
    bands = prefix[np.newaxis, :, :] - prefix[:, np.newaxis, :]
    lowest = np.minimum.accumulate(bands, axis=2)
    gain = bands[:, :, 1:] - lowest[:, :, :-1]
    gain[~np.triu(np.ones((ny + 1, ny + 1), dtype=bool), k=1)] = -np.inf
    top, bottom, right = np.unravel_index(int(np.argmax(gain)), gain.shape)
    if gain[top, bottom, right] <= 0:
        return None
    right += 1
    left = int(np.argmin(bands[top, bottom, :right]))

    span = int(np.ceil(max(region.width / nx, region.height / ny))) + 2
    box = (int(xs[left]), int(ys[top]), int(xs[right]), int(ys[bottom]))
    return _polish_sides(texture, box, span, cfg.texture_density)


def localization_features(texture: np.ndarray, window: Rect, cfg: DetectorConfig) -> np.ndarray:
    """Offsets from window to its dense texture box, then a bias term

    The offsets use the regressor's own (dx, dy, dlog w, dlog h) convention and
    are all zero when no textured box is found.
    """
    box = dense_texture_box(texture, window, cfg)
    offsets = box_offsets(window, box) if box is not None else np.zeros(4)
    return np.append(offsets, 1.0)


def relocalize(model: CascadeModel, detection: Detection, texture: np.ndarray,
               cfg: DetectorConfig) -> Detection:
    """Ridge re-localization of a detection; the score is kept"""
    if model.regressor is None:
        return detection
    if model.regressor.dim != LOCALIZATION_DIM:
        raise DetectionError(f"regressor expects {model.regressor.dim} features, "
                             f"localization gives {LOCALIZATION_DIM}")
    height, width = texture.shape[0] - 1, texture.shape[1] - 1
    feats = localization_features(texture, detection.rect, cfg)
    refined = apply_box_regressor(model.regressor, detection, feats, (width, height))
    return Detection(rect=refined, score=detection.score)


def detect_image(model: CascadeModel, img: ImageBuffer, cfg: DetectorConfig,
                 relocalize_box: bool = True) -> Detection:
    """Proposals, max-response detection and optional ridge re-localization"""
    proposals = generate_proposals(img, cfg)
    maps = prepare_features(img)
    detection = detect_max(model, img, proposals, maps=maps, fast_path=cfg.cascade_fast_path)
    if relocalize_box:
        detection = relocalize(model, detection, maps.texture(), cfg)
    return detection


def random_regionlet_set(rng: np.random.Generator, cfg: DetectorConfig) -> Tuple[RegionletSpec, ...]:
    """Candidate regionlet set sharing one feature id and channel"""
    feature_id = int(rng.integers(0, len(FEATURE_POOL)))
    channel = int(rng.integers(0, 3))
    count = int(rng.integers(1, cfg.max_regionlets + 1))
    specs = []
    for _ in range(count):
        coords = []
        for _axis in range(2):
            span = quantize(rng.uniform(cfg.min_regionlet_fraction, 1.0))
            start = quantize(rng.uniform(0.0, 1.0 - span))
            end = min(1.0, quantize(start + span))
            coords.append((start, end))
        (rx0, rx1), (ry0, ry1) = coords
        specs.append(RegionletSpec(rx0, ry0, rx1, ry1, feature_id, channel))
    return tuple(specs)
