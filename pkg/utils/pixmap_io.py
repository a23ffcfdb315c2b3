"""
Binary portable pixmap I/O (P5 grayscale, P6 RGB, maxval 255) via Pillow
"""
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from services.geometry import ImageBuffer
from utils.errors import PixmapFormatError

logger = logging.getLogger(__name__)

_CHANNELS = {b"P5": 1, b"P6": 3}
# magic, width, height, maxval, each separated by whitespace and optional comments
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")
_HEADER_PEEK = 1024


@dataclass(frozen=True)
class PixmapHeader:
    magic: bytes
    width: int
    height: int
    maxval: int
    data_offset: int

    @property
    def channels(self) -> int:
        return _CHANNELS[self.magic]

    @property
    def payload_size(self) -> int:
        return self.width * self.height * self.channels


def parse_header(data: bytes, source: str = "<bytes>") -> PixmapHeader:
    tokens = []
    pos = 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PixmapFormatError(f"{source}: truncated pixmap header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in _CHANNELS:
        raise PixmapFormatError(f"{source}: unsupported pixmap type {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise PixmapFormatError(f"{source}: non-numeric pixmap header field") from e
    if width < 1 or height < 1:
        raise PixmapFormatError(f"{source}: invalid pixmap size {width}x{height}")
    if maxval != 255:
        raise PixmapFormatError(f"{source}: maxval {maxval} not supported, expected 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PixmapFormatError(f"{source}: missing whitespace after pixmap header")
    return PixmapHeader(magic, width, height, maxval, pos + 1)


def read_pixmap_size(path: Union[str, Path]) -> Tuple[int, int]:
    """(width, height) from the header only"""
    with open(path, "rb") as fh:
        header = parse_header(fh.read(_HEADER_PEEK), str(path))
    return header.width, header.height


def decode_pixmap(data: bytes, source: str = "<bytes>") -> ImageBuffer:
    header = parse_header(data, source)
    available = len(data) - header.data_offset
    if available < header.payload_size:
        raise PixmapFormatError(
            f"{source}: truncated payload, {available} of {header.payload_size} bytes")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            pixels = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise PixmapFormatError(f"{source}: {e}") from e
    return ImageBuffer(pixels.reshape(header.height, header.width, header.channels))


def read_pixmap(path: Union[str, Path]) -> ImageBuffer:
    return decode_pixmap(Path(path).read_bytes(), str(path))


def encode_pixmap(img: ImageBuffer) -> bytes:
    pixels = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels)).save(buffer, format="PPM")
    return buffer.getvalue()


def write_pixmap(img: ImageBuffer, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pixmap(img))
    logger.debug(f"wrote {img.width}x{img.height}x{img.channels} pixmap to {path}")
