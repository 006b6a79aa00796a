"""Convert attention maps into segmentation prompts.

The high-activation band of the map (>= activation_fraction of the peak) is
binarized and split into connected components.  Several components become
multiple points at their centroids; a single component becomes the peak
plus a few seeded random samples from its neighborhood; a lone pixel
becomes a single point.  The bounding-box mode wraps all hot pixels.

Coordinates are (x=col, y=row), origin top-left.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, NoActivationError
from .gradcam import AttentionMap
from .rng import SplitMix64

KIND_SINGLE = "single_point"
KIND_MULTI = "multiple_points"
KIND_BOX = "bounding_box"

_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass
class PromptConfig:
    """Knobs for the attention-to-prompt conversion.

    ``sample_radius=None`` resolves per map to max(2, ceil(5% of the larger
    image dimension)).
    """

    activation_fraction: float = 0.8
    connectivity: int = 8
    sample_count: int = 3
    sample_radius: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.activation_fraction <= 1.0:
            raise ConfigError(
                f"activation_fraction must be in (0,1], got {self.activation_fraction}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.sample_count < 1:
            raise ConfigError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.sample_radius is not None and self.sample_radius < 1:
            raise ConfigError(f"sample_radius must be >= 1, got {self.sample_radius}")

    def radius_for(self, height: int, width: int) -> int:
        if self.sample_radius is not None:
            return self.sample_radius
        return max(2, math.ceil(0.05 * max(height, width)))


@dataclass(frozen=True)
class PromptSet:
    """Tagged prompt union: single point, multiple points, or a box.

    Points are (x, y) pixel coordinates; the box is (x0, y0, x1, y1)
    inclusive.
    """

    kind: str
    points: tuple[tuple[int, int], ...] = ()
    box: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.kind == KIND_SINGLE:
            if len(self.points) != 1 or self.box is not None:
                raise ValueError("single_point carries exactly one point")
        elif self.kind == KIND_MULTI:
            if len(self.points) < 2 or self.box is not None:
                raise ValueError("multiple_points carries at least two points")
            if len(set(self.points)) != len(self.points):
                raise ValueError("duplicate points in prompt")
        elif self.kind == KIND_BOX:
            if self.box is None or self.points:
                raise ValueError("bounding_box carries a box and no points")
            x0, y0, x1, y1 = self.box
            if x0 > x1 or y0 > y1:
                raise ValueError(f"degenerate box {self.box}")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if any(x < 0 or y < 0 for x, y in self.points):
            raise ValueError("negative prompt coordinates")
        if self.box is not None and any(v < 0 for v in self.box):
            raise ValueError("negative box coordinates")


@dataclass(frozen=True)
class Component:
    """One connected region of the binarized attention mask."""

    pixels: tuple[tuple[int, int], ...]      # (row, col), row-major order
    centroid: tuple[int, int]                # snapped to a member pixel
    peak: tuple[int, int]                    # max activation, ties row-major
    peak_value: float
    bbox: tuple[int, int, int, int]          # (row0, col0, row1, col1)


def binarize(attention: AttentionMap, activation_fraction: float = 0.8) -> np.ndarray:
    """Boolean mask of pixels >= activation_fraction * max; empty if the
    map is identically zero."""
    m = attention.normalized
    peak = m.max()
    if peak <= 0.0:
        return np.zeros(m.shape, dtype=bool)
    return m >= activation_fraction * peak


def components(mask: np.ndarray, values: np.ndarray,
               connectivity: int = 8) -> list[Component]:
    """Connected components of ``mask``, ordered by descending peak value.

    ``values`` supplies per-pixel activations for peak selection; ties in
    peak value break toward the component whose peak is first row-major.
    """
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps: list[Component] = []
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        queue = deque([(int(r0), int(c0))])
        seen[r0, c0] = True
        pixels = []
        while queue:
            r, c = queue.popleft()
            pixels.append((r, c))
            for dr, dc in offsets:
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                    seen[nr, nc] = True
                    queue.append((nr, nc))
        pixels.sort()
        peak = max(pixels, key=lambda p: (values[p], -p[0], -p[1]))
        rows = [p[0] for p in pixels]
        cols = [p[1] for p in pixels]
        cy, cx = sum(rows) / len(pixels), sum(cols) / len(pixels)
        centroid = min(pixels,
                       key=lambda p: ((p[0] - cy) ** 2 + (p[1] - cx) ** 2, p))
        comps.append(Component(
            pixels=tuple(pixels),
            centroid=centroid,
            peak=peak,
            peak_value=float(values[peak]),
            bbox=(min(rows), min(cols), max(rows), max(cols)),
        ))
    comps.sort(key=lambda c: (-c.peak_value, c.peak))
    return comps


def _xy(rc: tuple[int, int]) -> tuple[int, int]:
    return (rc[1], rc[0])


def to_point_prompts(attention: AttentionMap, cfg: PromptConfig) -> PromptSet:
    """Point prompts per the multi-region rules.

    Raises :class:`NoActivationError` on an identically-zero map (the object
    is presumed absent; callers should have gated on the similarity score).
    """
    mask = binarize(attention, cfg.activation_fraction)
    comps = components(mask, attention.normalized, cfg.connectivity)
    if not comps:
        raise NoActivationError("attention map has no active pixels")
    if len(comps) >= 2:
        return PromptSet(kind=KIND_MULTI,
                         points=tuple(_xy(c.centroid) for c in comps))
    comp = comps[0]
    peak = comp.peak
    radius = cfg.radius_for(*mask.shape)
    candidates = [p for p in comp.pixels
                  if p != peak
                  and max(abs(p[0] - peak[0]), abs(p[1] - peak[1])) <= radius]
    if not candidates:
        return PromptSet(kind=KIND_SINGLE, points=(_xy(peak),))
    rng = SplitMix64(cfg.seed)
    chosen = rng.sample_without_replacement(candidates, cfg.sample_count)
    return PromptSet(kind=KIND_MULTI,
                     points=(_xy(peak),) + tuple(_xy(p) for p in chosen))


def to_single_point_prompt(attention: AttentionMap) -> PromptSet:
    """Single point at the argmax of the normalized map (ties row-major)."""
    m = attention.normalized
    if m.max() <= 0.0:
        raise NoActivationError("attention map has no active pixels")
    r, c = np.unravel_index(int(np.argmax(m)), m.shape)
    return PromptSet(kind=KIND_SINGLE, points=((int(c), int(r)),))


def to_bbox_prompt(attention: AttentionMap, cfg: PromptConfig) -> PromptSet:
    """Tight inclusive box over every binarized pixel."""
    mask = binarize(attention, cfg.activation_fraction)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise NoActivationError("attention map has no active pixels")
    return PromptSet(kind=KIND_BOX, box=(int(cols.min()), int(rows.min()),
                                         int(cols.max()), int(rows.max())))


def prompt_to_json(prompt: PromptSet) -> str:
    """Serialize to the wire schema: versioned, integer coordinates."""
    if prompt.kind == KIND_BOX:
        doc = {"v": 1, "kind": "box", "box": list(prompt.box)}
    else:
        doc = {"v": 1, "kind": "points",
               "points": [[x, y] for x, y in prompt.points]}
    return json.dumps(doc, separators=(",", ":"))


def prompt_from_json(text: str | dict) -> PromptSet:
    """Parse and validate the wire schema; point count picks the kind."""
    try:
        doc = json.loads(text) if isinstance(text, str) else text
    except json.JSONDecodeError as exc:
        raise FormatError(f"prompt JSON malformed: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("prompt JSON must be an object")
    if doc.get("v") != 1:
        raise FormatError(f"unsupported prompt schema version {doc.get('v')!r}")
    kind = doc.get("kind")
    if kind == "points":
        pts = doc.get("points")
        if (not isinstance(pts, list) or not pts
                or not all(isinstance(p, list) and len(p) == 2
                           and all(isinstance(v, int) for v in p) for p in pts)):
            raise FormatError("points must be a nonempty list of [x, y] integers")
        points = tuple((p[0], p[1]) for p in pts)
        if len(points) == 1:
            return PromptSet(kind=KIND_SINGLE, points=points)
        return PromptSet(kind=KIND_MULTI, points=points)
    if kind == "box":
        box = doc.get("box")
        if (not isinstance(box, list) or len(box) != 4
                or not all(isinstance(v, int) for v in box)):
            raise FormatError("box must be [x0, y0, x1, y1] integers")
        return PromptSet(kind=KIND_BOX, box=tuple(box))
    raise FormatError(f"unknown prompt kind {kind!r}")
