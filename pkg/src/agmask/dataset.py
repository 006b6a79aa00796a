"""Dataset manifests and the synthetic shape-caption generator.

Each synthetic image carries one large target shape (captioned
"<color> <shape>") plus smaller distractor shapes of other concepts, on a
noisy gray background.  Shapes are flat-colored and never touch, so a
region grower seeded inside the target recovers its ground-truth mask.
Manifests are JSONL with fields: id, image, caption, category, mask, split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AgmaskError, ConfigError, FormatError
from .netpbm import Image, save_mask_pgm, save_ppm
from .rng import SplitMix64, derive_seed

SHAPES = ("circle", "square", "triangle")

DEFAULT_COLORS = {
    "red": (220, 50, 40),
    "green": (40, 190, 70),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 50),
    "magenta": (200, 60, 200),
    "cyan": (60, 200, 210),
}

BACKGROUND = (110, 110, 110)

MANIFEST_FIELDS = ("id", "image", "caption", "category", "mask", "split")


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset sample; paths are relative to the manifest file.

    ``base`` is the directory the relative paths resolve against (set by
    the loader/generator, never serialized).
    """

    id: str
    image: str
    caption: str
    category: str
    mask: str | None
    split: str
    base: Path | None = None

    def __post_init__(self):
        if not self.caption.strip():
            raise FormatError(f"entry {self.id!r}: caption is empty")
        if self.split not in ("train", "eval"):
            raise FormatError(f"entry {self.id!r}: bad split {self.split!r}")

    @property
    def image_path(self) -> Path:
        return self.base / self.image if self.base else Path(self.image)

    @property
    def mask_path(self) -> Path | None:
        if self.mask is None:
            return None
        return self.base / self.mask if self.base else Path(self.mask)


@dataclass
class SynthConfig:
    """Synthetic corpus shape: concepts are (color, shape) pairs.

    ``concepts=None`` takes the full colors x shapes cross product.  The
    noise amplitude must stay below a quarter of the smallest inter-color
    distance so flat shapes remain separable from the background.
    """

    size: int = 64
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: dict[str, tuple[int, int, int]] = field(
        default_factory=lambda: dict(DEFAULT_COLORS))
    concepts: list[tuple[str, str]] | None = None
    distractors: int = 2
    noise: int = 4
    count_per_concept: int = 10
    seed: int = 0
    target_extent: tuple[int, int] | None = None

    def __post_init__(self):
        if self.size < 16:
            raise ConfigError(f"size must be >= 16, got {self.size}")
        for shape in self.shapes:
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape {shape!r}")
        if self.concepts is not None:
            for color, shape in self.concepts:
                if color not in self.colors or shape not in self.shapes:
                    raise ConfigError(f"unknown concept {(color, shape)!r}")
        if len(self.concept_list()) < 2:
            raise ConfigError("need at least 2 concepts")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")
        if self.count_per_concept < 1:
            raise ConfigError("count_per_concept must be >= 1")
        palette = list(self.colors.values()) + [BACKGROUND]
        min_gap = min(
            math.dist(a, b)
            for i, a in enumerate(palette) for b in palette[i + 1:])
        if self.noise < 0 or self.noise >= min_gap / 4:
            raise ConfigError(
                f"noise {self.noise} must be below min inter-color distance/4 "
                f"({min_gap / 4:.1f})")

    def concept_list(self) -> list[tuple[str, str]]:
        if self.concepts is not None:
            return list(self.concepts)
        return [(color, shape) for color in self.colors for shape in self.shapes]


def shape_mask(shape: str, cy: int, cx: int, extent: int,
               height: int, width: int) -> np.ndarray:
    """Rasterize a filled shape of half-extent ``extent`` at (cy, cx)."""
    ys, xs = np.mgrid[0:height, 0:width]
    dy, dx = ys - cy, xs - cx
    if shape == "circle":
        return dy * dy + dx * dx <= extent * extent
    if shape == "square":
        return (np.abs(dy) <= extent) & (np.abs(dx) <= extent)
    if shape == "triangle":
        # filled isoceles triangle, apex up: width grows toward the base
        half_width = (dy + extent) / 2.0
        return (np.abs(dy) <= extent) & (np.abs(dx) <= half_width)
    raise ConfigError(f"unknown shape {shape!r}")


def split_of(sample_id: str, seed: int) -> str:
    """80/20 train/eval split from the id hash; order-independent."""
    return "train" if derive_seed(seed, "split:" + sample_id) % 100 < 80 else "eval"


def _try_place(rng: SplitMix64, shape: str, extent: int, size: int,
               occupied: np.ndarray) -> np.ndarray | None:
    """One placement attempt; the 1px-dilated footprint must avoid
    ``occupied`` so no two shapes ever touch (4- or 8-adjacent)."""
    margin = extent + 1
    cy = rng.randint(margin, size - 1 - margin)
    cx = rng.randint(margin, size - 1 - margin)
    halo = shape_mask(shape, cy, cx, extent + 1, size, size)
    if np.any(halo & occupied):
        return None
    return shape_mask(shape, cy, cx, extent, size, size)


def _place_distractor(rng: SplitMix64, shape: str, size: int,
                      occupied: np.ndarray) -> np.ndarray:
    """Distractor placement: redraw size and position up to 100 times."""
    cap = max(5, size // 9)
    for _ in range(100):
        extent = rng.randint(4, cap)
        mask = _try_place(rng, shape, extent, size, occupied)
        if mask is not None:
            return mask
    raise AgmaskError("could not place shape without overlap after 100 attempts")


def _render_sample(cfg: SynthConfig, sample_id: str,
                   concept: tuple[str, str]) -> tuple[Image, np.ndarray]:
    rng = SplitMix64(derive_seed(cfg.seed, "render:" + sample_id))
    size = cfg.size
    noise = np.array([[rng.randint(-cfg.noise, cfg.noise) for _ in range(3)]
                      for _ in range(size * size)]).reshape(size, size, 3)
    canvas = np.clip(np.array(BACKGROUND) + noise, 0, 255).astype(np.uint8)

    color_name, shape_name = concept
    if cfg.target_extent is not None:
        lo, hi = cfg.target_extent
    else:
        lo = max(5, size // 5)
        hi = max(lo, size // 4)
    target = None
    while target is None:  # first placement on an empty canvas rarely loops
        target = _try_place(rng, shape_name, rng.randint(lo, hi), size,
                            np.zeros((size, size), dtype=bool))
    canvas[target] = cfg.colors[color_name]

    # distractors never share the target's color: a same-color twin shape
    # would plant contradictory evidence inside the image
    occupied = target.copy()
    others = [c for c in cfg.concept_list()
              if c != concept and c[0] != color_name]
    if not others:
        others = [c for c in cfg.concept_list() if c != concept]
    for _ in range(cfg.distractors):
        d_color, d_shape = others[rng.randrange(len(others))]
        d_mask = _place_distractor(rng, d_shape, size, occupied)
        canvas[d_mask] = cfg.colors[d_color]
        occupied |= d_mask
    return Image(pixels=canvas), target


def synth_generate(cfg: SynthConfig, out_dir) -> list[ManifestEntry]:
    """Render the corpus under ``out_dir`` and write manifest.jsonl.

    Deterministic: the same config produces byte-identical trees.
    """
    out = Path(out_dir).resolve()
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for color, shape in cfg.concept_list():
        for i in range(cfg.count_per_concept):
            sample_id = f"{color}-{shape}-{i:04d}"
            image, target = _render_sample(cfg, sample_id, (color, shape))
            image_rel = f"images/{sample_id}.ppm"
            mask_rel = f"masks/{sample_id}.pgm"
            save_ppm(image, out / image_rel)
            save_mask_pgm(target, out / mask_rel)
            entries.append(ManifestEntry(
                id=sample_id, image=image_rel, caption=f"{color} {shape}",
                category=shape, mask=mask_rel,
                split=split_of(sample_id, cfg.seed), base=out))
    save_manifest(entries, out / "manifest.jsonl")
    return entries


def save_manifest(entries: list[ManifestEntry], path) -> None:
    lines = []
    for e in entries:
        doc = {"id": e.id, "image": e.image, "caption": e.caption,
               "category": e.category, "mask": e.mask, "split": e.split}
        lines.append(json.dumps(doc, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def load_manifest(path) -> list[ManifestEntry]:
    """Parse and validate JSONL; entries keep file order.

    Errors carry the offending line number or id; referenced files must
    exist relative to the manifest.
    """
    path = Path(path)
    base = path.parent.resolve()
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
        missing = [k for k in MANIFEST_FIELDS if k != "mask" and k not in doc]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing fields {missing}")
        entry = ManifestEntry(
            id=str(doc["id"]), image=str(doc["image"]), caption=str(doc["caption"]),
            category=str(doc["category"]),
            mask=None if doc.get("mask") is None else str(doc["mask"]),
            split=str(doc["split"]), base=base)
        if entry.id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        if not (base / entry.image).exists():
            raise FormatError(f"{path}:{lineno}: missing image file {entry.image}")
        if entry.mask is not None and not (base / entry.mask).exists():
            raise FormatError(f"{path}:{lineno}: missing mask file {entry.mask}")
        entries.append(entry)
    return entries
