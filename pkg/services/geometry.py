"""
Integer rectangle arithmetic and raster primitives

Rectangles are half-open: [x0, x1) x [y0, y1). Images are row-major,
channel-interleaved 8-bit arrays of shape (height, width, channels).
"""
from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np

from utils.errors import GeometryError


@dataclass(frozen=True, slots=True)
class Rect:
    """Half-open integer pixel rectangle"""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise GeometryError(f"Rect.{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise GeometryError(f"Rect must have positive area: {self.as_tuple()}")

    @classmethod
    def from_size(cls, x: int, y: int, width: int, height: int) -> "Rect":
        return cls(x, y, x + width, y + height)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def inside(self, width: int, height: int) -> bool:
        """True when the rect lies within a width x height image"""
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def clip(self, width: int, height: int) -> "Rect | None":
        """Intersection with the image frame, None when nothing is left"""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect(x0, y0, x1, y1)

    def mirrored(self, image_width: int) -> "Rect":
        """Same region after a horizontal flip of an image_width wide image"""
        return Rect(image_width - self.x1, self.y0, image_width - self.x0, self.y1)


@dataclass(frozen=True, slots=True)
class ImageBuffer:
    """Immutable 8-bit image, pixels shaped (height, width, channels)"""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, np.newaxis]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise GeometryError(f"image must be (h, w, 1|3), got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise GeometryError(f"image must be at least 1x1, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            raise GeometryError(f"image samples must be uint8, got {pixels.dtype}")
        if pixels.flags.writeable or not pixels.flags.c_contiguous:
            pixels = np.array(pixels, order="C", copy=True)
            pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def size(self) -> Tuple[int, int]:
        return (self.width, self.height)

    def frame(self) -> Rect:
        return Rect(0, 0, self.width, self.height)

    def gray(self) -> np.ndarray:
        """Float64 (h, w) intensity, (r+g+b)/3 for RGB"""
        return self.pixels.astype(np.float64).mean(axis=2)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True, slots=True)
class IntegralImage:
    """Summed-area table of shape (height+1, width+1, channels), int64"""
    table: np.ndarray

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    def region_sum(self, r: Rect) -> np.ndarray:
        """Per-channel sum over r via the 4-corner lookup"""
        t = self.table
        return t[r.y1, r.x1] - t[r.y0, r.x1] - t[r.y1, r.x0] + t[r.y0, r.x0]


def intersect_area(a: Rect, b: Rect) -> int:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou(a: Rect, b: Rect) -> float:
    inter = intersect_area(a, b)
    return inter / (a.area + b.area - inter)


def intersection_over_reference(a: Rect, reference: Rect) -> float:
    """|a ∩ reference| / |reference|"""
    return intersect_area(a, reference) / reference.area


def scaled_size(width: int, height: int, target: int) -> Tuple[int, int]:
    """Output size of resize_shorter_side, long side rounded half-up"""
    if target < 1:
        raise GeometryError(f"resize target must be >= 1, got {target}")
    short, long = (width, height) if width <= height else (height, width)
    new_long = max(1, (2 * long * target + short) // (2 * short))
    if width <= height:
        return target, new_long
    return new_long, target


def resize_shorter_side(img: ImageBuffer, target: int) -> ImageBuffer:
    new_w, new_h = scaled_size(img.width, img.height, target)
    if (new_w, new_h) == img.size:
        return img
    resized = cv2.resize(img.pixels, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return ImageBuffer(resized.reshape(new_h, new_w, img.channels))


def scale_rect(r: Rect, sx: float, sy: float, width: int, height: int) -> "Rect | None":
    """Map r through an axis scaling into a width x height frame, rounding outward-safe"""
    x0 = int(np.floor(r.x0 * sx + 0.5))
    y0 = int(np.floor(r.y0 * sy + 0.5))
    x1 = max(x0 + 1, int(np.floor(r.x1 * sx + 0.5)))
    y1 = max(y0 + 1, int(np.floor(r.y1 * sy + 0.5)))
    return Rect(x0, y0, x1, y1).clip(width, height)


def flip_horizontal(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1, :])


def crop_image(img: ImageBuffer, r: Rect) -> ImageBuffer:
    if not r.inside(img.width, img.height):
        raise GeometryError(f"crop {r.as_tuple()} leaves the {img.width}x{img.height} image")
    return ImageBuffer(img.pixels[r.y0:r.y1, r.x0:r.x1, :])


def integral_table(values: np.ndarray) -> np.ndarray:
    """Zero-padded int64 summed-area table of a (h, w) or (h, w, c) integer array"""
    arr = np.asarray(values, dtype=np.int64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, np.newaxis]
    table = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1, arr.shape[2]), dtype=np.int64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=table[1:, 1:, :])
    return table[:, :, 0] if squeeze else table


def integral_image(img: ImageBuffer) -> IntegralImage:
    return IntegralImage(integral_table(img.pixels))
