"""Promptable segmentation: reference region growing plus external backend.

The reference segmenter grows a region from each prompt point by breadth-
first search (4-connectivity); a neighbor joins while its RGB distance to
the growing region's running mean stays within the color tolerance.  Box
prompts grow from the box center with growth clipped to the box.  The
external backend forwards the request to an adapter process speaking the
JSON-lines protocol.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .netpbm import Image, load_mask_pgm, save_mask_pgm
from .prompting import KIND_BOX, PromptSet, prompt_to_json
from .protocol import AdapterClient, ProtocolError, decode_tensor, encode_tensor

BACKENDS = ("reference", "external")


@dataclass(frozen=True)
class Mask:
    """Binary object mask; True marks object pixels."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.bool_:
            raise DimensionError(
                f"mask must be a 2-D boolean array, got {self.pixels.shape} "
                f"{self.pixels.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def popcount(self) -> int:
        return int(self.pixels.sum())

    def save(self, path) -> None:
        save_mask_pgm(self.pixels, path)

    @classmethod
    def load(cls, path) -> "Mask":
        return cls(pixels=load_mask_pgm(path))


@dataclass
class SegmenterConfig:
    """Backend choice plus region-growing tolerance and adapter wiring."""

    backend: str = "reference"
    color_tolerance: float = 30.0
    external_command: list[str] = field(default_factory=list)
    timeout: float = 10.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.color_tolerance < 0:
            raise ConfigError(f"color_tolerance must be >= 0, got {self.color_tolerance}")
        if self.backend == "external":
            if not self.external_command:
                raise ConfigError("external backend requires external_command")
            if self.timeout <= 0:
                raise ConfigError(f"timeout must be positive, got {self.timeout}")


def _grow_region(pixels: np.ndarray, seed: tuple[int, int], tolerance: float,
                 bounds: tuple[int, int, int, int]) -> np.ndarray:
    """BFS from one seed against the running region mean; returns a bool mask."""
    r0, c0, r1, c1 = bounds
    h, w = pixels.shape[:2]
    member = np.zeros((h, w), dtype=bool)
    sr, sc = seed
    member[sr, sc] = True
    total = pixels[sr, sc].copy()
    count = 1
    queue = deque([(sr, sc)])
    tol_sq = tolerance * tolerance
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if not (r0 <= nr <= r1 and c0 <= nc <= c1) or member[nr, nc]:
                continue
            diff = pixels[nr, nc] - total / count
            if diff @ diff <= tol_sq:
                member[nr, nc] = True
                total += pixels[nr, nc]
                count += 1
                queue.append((nr, nc))
    return member


def _check_point(image: Image, x: int, y: int) -> None:
    if not (0 <= x < image.width and 0 <= y < image.height):
        raise ValueError(
            f"prompt point ({x},{y}) outside {image.width}x{image.height} image")


def segment_points(image: Image, prompts: PromptSet, cfg: SegmenterConfig) -> Mask:
    """Union of region growths from every prompt point."""
    if prompts.kind == KIND_BOX:
        raise ValueError("segment_points requires point prompts")
    pixels = image.to_float_hw3()
    mask = np.zeros((image.height, image.width), dtype=bool)
    bounds = (0, 0, image.height - 1, image.width - 1)
    for x, y in prompts.points:
        _check_point(image, x, y)
        mask |= _grow_region(pixels, (y, x), cfg.color_tolerance, bounds)
    return Mask(pixels=mask)


def segment_box(image: Image, prompts: PromptSet, cfg: SegmenterConfig) -> Mask:
    """Region growth seeded at the box center, clipped to the box."""
    if prompts.kind != KIND_BOX:
        raise ValueError("segment_box requires a box prompt")
    x0, y0, x1, y1 = prompts.box
    _check_point(image, x0, y0)
    _check_point(image, x1, y1)
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    member = _grow_region(image.to_float_hw3(), (cy, cx), cfg.color_tolerance,
                          (y0, x0, y1, x1))
    return Mask(pixels=member)


def segment_external(image: Image, prompts: PromptSet, cfg: SegmenterConfig,
                     client: AdapterClient | None = None,
                     request_id: str = "segment") -> Mask:
    """Forward the request to the external adapter and decode its mask.

    Distinct failures raise distinct errors: AdapterSpawnError,
    AdapterTimeoutError, ProtocolError (malformed reply) and DimensionError
    (mask dims disagree with the image).
    """
    own_client = client is None
    if own_client:
        client = AdapterClient(cfg.external_command, timeout=cfg.timeout)
    try:
        request = {
            "v": 1, "op": "segment", "id": request_id,
            "image": encode_tensor(image.pixels.transpose(2, 0, 1), "u8"),
            "prompts": json.loads(prompt_to_json(prompts)),
        }
        response = client.roundtrip(request)
    finally:
        if own_client:
            client.close()
    if not response["ok"]:
        raise ProtocolError(f"adapter error: {response['error']}")
    if "mask" not in response:
        raise ProtocolError("adapter reply lacks a mask tensor")
    arr = decode_tensor(response["mask"])
    if arr.shape != (image.height, image.width):
        raise DimensionError(
            f"adapter mask {arr.shape} does not match image "
            f"{(image.height, image.width)}")
    return Mask(pixels=arr > 0)


def segment(image: Image, prompts: PromptSet, cfg: SegmenterConfig,
            client: AdapterClient | None = None,
            request_id: str = "segment") -> Mask:
    """Dispatch on backend and prompt kind."""
    if cfg.backend == "external":
        return segment_external(image, prompts, cfg, client=client,
                                request_id=request_id)
    if prompts.kind == KIND_BOX:
        return segment_box(image, prompts, cfg)
    return segment_points(image, prompts, cfg)
