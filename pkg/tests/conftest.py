import numpy as np
import pytest

from services.geometry import ImageBuffer, Rect


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def solid_image(width, height, color=(128, 128, 128)):
    pixels = np.empty((height, width, len(color)), dtype=np.uint8)
    pixels[:, :] = color
    return ImageBuffer(pixels)


def boxed_image(width, height, box: Rect, inside=(220, 40, 40), outside=(60, 60, 60)):
    """Flat background with one flat-colored rectangle"""
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:, :] = outside
    pixels[box.y0:box.y1, box.x0:box.x1] = inside
    return ImageBuffer(pixels)


def random_image(rng, width, height, channels=3):
    return ImageBuffer(rng.integers(0, 256, size=(height, width, channels), dtype=np.uint8))


def random_rect(rng, width, height):
    x0 = int(rng.integers(0, width))
    y0 = int(rng.integers(0, height))
    x1 = int(rng.integers(x0 + 1, width + 1))
    y1 = int(rng.integers(y0 + 1, height + 1))
    return Rect(x0, y0, x1, y1)
