"""
Salient ground-truth selection and the synthetic cluttered-scene generator

A record lists every candidate object in an image; exactly one of them, the
label-consistent, visible, biggest and most central one, is the salient
ground truth used to train the detector. Synthetic scenes draw a
class-textured salient object over low-frequency noise, clutter and smaller
distractor objects.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.geometry import ImageBuffer, Rect
from utils.errors import GeometryError, UnlabelableImageError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
ASPECTS = (1.0, 4.0 / 3.0, 3.0 / 4.0)
OCCLUSION_FRACTION = 0.25


@dataclass(frozen=True)
class ObjectAnnotation:
    box: Rect
    label: int
    occluded: bool = False
    truncated: bool = False

    def sort_key(self):
        return (self.box.as_tuple(), self.label, self.occluded, self.truncated)


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    label: int
    objects: Tuple[ObjectAnnotation, ...] = ()
    salient_index: Optional[int] = None
    image_size: Optional[Tuple[int, int]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.label < 0:
            raise GeometryError(f"{self.image_path}: negative label {self.label}")
        if self.salient_index is not None:
            if not 0 <= self.salient_index < len(self.objects):
                raise GeometryError(
                    f"{self.image_path}: salient index {self.salient_index} outside "
                    f"{len(self.objects)} objects")
            if self.objects[self.salient_index].label != self.label:
                raise GeometryError(f"{self.image_path}: salient object label disagrees with image label")
        if self.image_size is not None:
            width, height = self.image_size
            for obj in self.objects:
                if not obj.box.inside(width, height):
                    raise GeometryError(
                        f"{self.image_path}: box {obj.box.as_tuple()} outside {width}x{height} image")

    @property
    def salient_box(self) -> Optional[Rect]:
        if self.salient_index is None:
            return None
        return self.objects[self.salient_index].box


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[AnnotationRecord, ...]
    class_names: Tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.split not in SPLITS:
            raise GeometryError(f"split must be one of {SPLITS}, got {self.split!r}")
        for record in self.records:
            labels = [record.label] + [o.label for o in record.objects]
            if any(not 0 <= k < self.num_classes for k in labels):
                raise GeometryError(
                    f"{record.image_path}: label outside {self.num_classes} classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def image_paths(self) -> Tuple[str, ...]:
        return tuple(r.image_path for r in self.records)


def default_class_names(num_classes: int) -> Tuple[str, ...]:
    return tuple(f"class_{k}" for k in range(num_classes))


class SceneSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_width_range: Tuple[int, int] = (240, 360)
    image_height_range: Tuple[int, int] = (200, 300)
    num_classes: int = Field(10, ge=1)
    salient_area_range: Tuple[float, float] = (0.20, 0.60)
    distractor_count_range: Tuple[int, int] = (0, 3)
    distractor_area_range: Tuple[float, float] = (0.02, 0.12)
    occlusion_probability: float = Field(0.3, ge=0.0, le=1.0)
    same_class_distractor_probability: float = Field(0.3, ge=0.0, le=1.0)
    truncation_probability: float = Field(0.2, ge=0.0, le=1.0)
    clutter_density: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("image_width_range", "image_height_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered non-negative range, got ({lo}, {hi})")
        if self.image_width_range[0] < 16 or self.image_height_range[0] < 16:
            raise ValueError("synthetic images must be at least 16x16")
        for name in ("salient_area_range", "distractor_area_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
        if self.salient_area_range[0] <= self.distractor_area_range[1]:
            raise ValueError("salient area range must lie strictly above the distractor area range")
        return self


def _center_distance2(box: Rect, width: int, height: int) -> int:
    """Squared center-to-image-center distance, scaled by 4 to stay integral"""
    return (box.x0 + box.x1 - width) ** 2 + (box.y0 + box.y1 - height) ** 2


def select_salient_ground_truth(candidates: Sequence[ObjectAnnotation], image_label: int,
                                image_size: Tuple[int, int], rng: np.random.Generator) -> int:
    """Index of the salient object: label match, then visible, bigger, more central"""
    width, height = image_size
    pool = [i for i, c in enumerate(candidates) if c.label == image_label]
    if not pool:
        raise UnlabelableImageError(f"unlabelable image: no candidate carries label {image_label}")
    visible = [i for i in pool if not candidates[i].occluded]
    pool = visible or pool
    biggest = max(candidates[i].box.area for i in pool)
    pool = [i for i in pool if candidates[i].box.area == biggest]
    nearest = min(_center_distance2(candidates[i].box, width, height) for i in pool)
    pool = [i for i in pool if _center_distance2(candidates[i].box, width, height) == nearest]
    if len(pool) == 1:
        return pool[0]

    # canonical order so the winner does not depend on candidate order
    pool.sort(key=lambda i: (candidates[i].sort_key(), i))
    winner = candidates[pool[int(rng.integers(0, len(pool)))]]
    return next(i for i, c in enumerate(candidates) if c == winner)


def class_colors(class_id: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """(light, dark) RGB stripe colors with a per-class hue"""
    hue = int(180 * class_id / max(num_classes, 1)) % 180
    hsv = np.array([[[hue, 200, 230], [hue, 230, 70]]], dtype=np.uint8)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0].astype(np.float64)
    return rgb[0], rgb[1]


def class_signature(class_id: int, num_classes: int) -> Tuple[float, float]:
    """(orientation in radians, stripe cycles across the object)"""
    orientation = np.pi * class_id / max(num_classes, 1)
    cycles = 3.0 + 2.0 * (class_id % 4)
    return float(orientation), cycles


def render_texture(class_id: int, num_classes: int, width: int, height: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Oriented stripes in object-relative coordinates, (h, w, 3) uint8"""
    orientation, cycles = class_signature(class_id, num_classes)
    light, dark = class_colors(class_id, num_classes)
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(orientation) * u[np.newaxis, :] + np.sin(orientation) * v[:, np.newaxis]
    stripes = 0.5 + 0.5 * np.sin(2.0 * np.pi * cycles * ramp + phase)
    texture = dark + stripes[:, :, np.newaxis] * (light - dark)
    texture += rng.normal(0.0, 6.0, size=texture.shape)
    return np.clip(np.floor(texture + 0.5), 0, 255).astype(np.uint8)


def render_background(width: int, height: int, clutter_density: float,
                      rng: np.random.Generator) -> np.ndarray:
    grid_w, grid_h = max(2, width // 40), max(2, height // 40)
    base = rng.uniform(70.0, 190.0, size=(grid_h, grid_w, 1))
    tint = rng.uniform(-15.0, 15.0, size=(grid_h, grid_w, 3))
    grid = np.clip(base + tint, 0, 255).astype(np.uint8)
    canvas = np.ascontiguousarray(cv2.resize(grid, (width, height), interpolation=cv2.INTER_CUBIC))

    for _ in range(int(rng.integers(0, int(round(clutter_density * 30)) + 1))):
        w = int(rng.integers(4, max(5, width * 15 // 100)))
        h = int(rng.integers(4, max(5, height * 15 // 100)))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        thickness = -1 if rng.random() < 0.6 else int(rng.integers(1, 4))
        cv2.rectangle(canvas, (x, y), (x + w - 1, y + h - 1), color, thickness)
    return canvas


def _object_size(area_fraction: float, aspect: float, width: int, height: int,
                 area_range: Tuple[float, float]) -> Tuple[int, int]:
    image_area = width * height
    target = area_fraction * image_area
    w = min(max(int(round(np.sqrt(target * aspect))), 1), width)
    h = min(max(int(round(target / w)), 1), height)
    lo, hi = area_range[0] * image_area, area_range[1] * image_area
    if w * h < lo:
        h = min(int(np.ceil(lo / w)), height)
    if w * h > hi:
        h = max(int(np.floor(hi / w)), 1)
    return w, h


def _place_salient(w: int, h: int, width: int, height: int, rng: np.random.Generator) -> Rect:
    cx = rng.uniform(0.2 * width, 0.8 * width)
    cy = rng.uniform(0.2 * height, 0.8 * height)
    x0 = min(max(int(round(cx - w / 2.0)), 0), width - w)
    y0 = min(max(int(round(cy - h / 2.0)), 0), height - h)
    return Rect.from_size(x0, y0, w, h)


def _place_distractor(w: int, h: int, width: int, height: int, salient: Rect, overlap: bool,
                      truncate: bool, rng: np.random.Generator) -> Tuple[Rect, Rect]:
    """(drawn rect, possibly off-frame) and its clipped visible part"""
    if overlap:
        cx = rng.uniform(salient.x0, salient.x1)
        cy = rng.uniform(salient.y0, salient.y1)
        x0, y0 = int(round(cx - w / 2.0)), int(round(cy - h / 2.0))
    elif truncate:
        x0 = int(rng.integers(-(w // 2), width - w // 2))
        y0 = int(rng.integers(-(h // 2), height - h // 2))
    else:
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
    if not truncate:
        x0 = min(max(x0, 0), width - w)
        y0 = min(max(y0, 0), height - h)
    drawn = Rect.from_size(x0, y0, w, h)
    return drawn, drawn.clip(width, height)


def _distractor_label(class_id: int, spec: SceneSpec, rng: np.random.Generator) -> int:
    if spec.num_classes == 1 or rng.random() < spec.same_class_distractor_probability:
        return class_id
    return int((class_id + rng.integers(1, spec.num_classes)) % spec.num_classes)


def generate_synthetic_scene(spec: SceneSpec, class_id: int, rng: np.random.Generator,
                             image_path: str = "") -> Tuple[ImageBuffer, AnnotationRecord]:
    if not 0 <= class_id < spec.num_classes:
        raise GeometryError(f"class {class_id} outside {spec.num_classes} classes")
    width = int(rng.integers(spec.image_width_range[0], spec.image_width_range[1] + 1))
    height = int(rng.integers(spec.image_height_range[0], spec.image_height_range[1] + 1))
    canvas = render_background(width, height, spec.clutter_density, rng)

    aspect = ASPECTS[int(rng.integers(0, len(ASPECTS)))]
    sw, sh = _object_size(rng.uniform(*spec.salient_area_range), aspect, width, height,
                          spec.salient_area_range)
    salient = _place_salient(sw, sh, width, height, rng)

    # owner of every pixel: -1 background, else object index in drawing order
    owner = np.full((height, width), -1, dtype=np.int64)
    placed = []
    for index in range(int(rng.integers(spec.distractor_count_range[0], spec.distractor_count_range[1] + 1))):
        label = _distractor_label(class_id, spec, rng)
        aspect = ASPECTS[int(rng.integers(0, len(ASPECTS)))]
        dw, dh = _object_size(rng.uniform(*spec.distractor_area_range), aspect, width, height,
                              spec.distractor_area_range)
        overlap = rng.random() < spec.occlusion_probability
        truncate = rng.random() < spec.truncation_probability
        drawn, visible = _place_distractor(dw, dh, width, height, salient, overlap, truncate, rng)
        texture = render_texture(label, spec.num_classes, drawn.width, drawn.height, rng)
        tx0, ty0 = visible.x0 - drawn.x0, visible.y0 - drawn.y0
        canvas[visible.y0:visible.y1, visible.x0:visible.x1] = \
            texture[ty0:ty0 + visible.height, tx0:tx0 + visible.width]
        owner[visible.y0:visible.y1, visible.x0:visible.x1] = index
        placed.append((visible, label, visible != drawn))

    canvas[salient.y0:salient.y1, salient.x0:salient.x1] = \
        render_texture(class_id, spec.num_classes, salient.width, salient.height, rng)
    owner[salient.y0:salient.y1, salient.x0:salient.x1] = len(placed)

    visible_counts = np.bincount(owner[owner >= 0], minlength=len(placed) + 1)
    objects = []
    for index, (box, label, truncated) in enumerate(placed):
        hidden = 1.0 - visible_counts[index] / box.area
        objects.append(ObjectAnnotation(box, label, hidden >= OCCLUSION_FRACTION, truncated))
    objects.append(ObjectAnnotation(salient, class_id, False, False))
    objects = [objects[i] for i in rng.permutation(len(objects))]

    salient_index = select_salient_ground_truth(objects, class_id, (width, height), rng)
    record = AnnotationRecord(image_path, class_id, tuple(objects), salient_index, (width, height))
    return ImageBuffer(canvas), record


def scene_rng(seed: int, split: str, scene_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), scene_index])


def scene_path(split: str, scene_index: int) -> str:
    return f"images/{split}_{scene_index:05d}.ppm"


def generate_indexed_scene(spec: SceneSpec, split: str,
                           scene_index: int) -> Tuple[ImageBuffer, AnnotationRecord]:
    """Scene number scene_index of a split; classes assigned round-robin"""
    return generate_synthetic_scene(spec, scene_index % spec.num_classes,
                                    scene_rng(spec.seed, split, scene_index),
                                    scene_path(split, scene_index))


def split_sizes(total: int, train_fraction: float = 0.8) -> Tuple[int, int]:
    train = int(np.floor(total * train_fraction + 0.5))
    return train, total - train
