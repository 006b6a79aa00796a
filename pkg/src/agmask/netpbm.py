"""Binary PPM (P6) and PGM (P5) codecs plus the RGB Image type.

Writers always emit maxval 255 with a fixed single-whitespace header so
files are bit-exact reproducible; loaders accept '#' comments but reject
any other deviation (bad magic, maxval != 255, truncated payload).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DimensionError, FormatError


@dataclass(frozen=True)
class Image:
    """RGB raster, uint8, stored (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionError(f"Image expects (H,W,3), got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise FormatError(f"Image pixels must be uint8, got {self.pixels.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> nn.Tensor:
        """Channels-first float tensor scaled to [0, 1]."""
        return nn.Tensor(self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0)

    def to_float_hw3(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


def _parse_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Return (width, height, payload offset); validates magic and maxval."""
    if not data.startswith(magic):
        raise FormatError(f"{path}: unsupported format, expected {magic.decode()}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"{path}: truncated header")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise FormatError(f"{path}: bad header byte {ch!r}")
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (must be 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval")
    return width, height, pos + 1


def load_ppm(path) -> Image:
    """Load a binary P6 RGB image with maxval 255."""
    data = Path(path).read_bytes()
    width, height, offset = _parse_header(data, b"P6", path)
    expected = width * height * 3
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels=pixels.copy())


def save_ppm(image: Image, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    """Load a binary P5 grayscale raster as a uint8 (H, W) array."""
    data = Path(path).read_bytes()
    width, height, offset = _parse_header(data, b"P5", path)
    expected = width * height
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def save_pgm(gray: np.ndarray, path) -> None:
    if gray.ndim != 2:
        raise DimensionError(f"save_pgm expects (H,W), got {gray.shape}")
    gray = np.asarray(gray, dtype=np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def load_mask_pgm(path) -> np.ndarray:
    """Load a P5 mask as booleans; values >= 128 count as object pixels."""
    return load_pgm(path) >= 128


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Write a boolean mask as P5 with 0 = background, 255 = object."""
    if mask.dtype != np.bool_:
        raise FormatError(f"save_mask_pgm expects a boolean array, got {mask.dtype}")
    save_pgm(np.where(mask, 255, 0).astype(np.uint8), path)
