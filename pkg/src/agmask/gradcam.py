"""Gradient-weighted attention maps.

Channel weights are the spatial mean of the similarity gradient at the
target conv layer; the map is the ReLU of the weighted channel sum,
peak-normalized to [0, 1] and upsampled (corner-aligned bilinear) to image
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .encoders import DualEncoder
from .errors import DimensionError
from .netpbm import Image


@dataclass(frozen=True)
class AttentionMap:
    """Attention field at feature resolution (raw) and image resolution.

    ``normalized`` peaks at exactly 1 unless the map is identically zero;
    ``peak`` is the raw argmax mapped into the image frame (ties resolved
    toward the smallest row, then the smallest column).
    """

    raw: np.ndarray
    normalized: np.ndarray
    peak: tuple[int, int]

    @property
    def is_empty(self) -> bool:
        return float(self.raw.max()) == 0.0

    def to_u8(self) -> np.ndarray:
        """8-bit rendering: round(255 * normalized), for PGM export."""
        return np.floor(self.normalized * 255.0 + 0.5).astype(np.uint8)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, nn.Tensor) else np.asarray(x, dtype=np.float64)


def channel_weights(grads) -> np.ndarray:
    """Spatial mean of the per-channel gradients; (K,Hf,Wf) -> (K,)."""
    g = _as_array(grads)
    if g.ndim != 3 or g.size == 0:
        raise DimensionError(f"channel_weights expects nonempty (K,Hf,Wf), got {g.shape}")
    return g.mean(axis=(1, 2))


def raw_attention(features, alpha) -> np.ndarray:
    """ReLU of the alpha-weighted channel sum; (K,Hf,Wf) x (K,) -> (Hf,Wf)."""
    f = _as_array(features)
    a = np.asarray(alpha, dtype=np.float64)
    if f.ndim != 3 or a.shape != (f.shape[0],):
        raise DimensionError(
            f"raw_attention length mismatch: features {f.shape}, alpha {a.shape}")
    return np.maximum(np.tensordot(a, f, axes=(0, 0)), 0.0)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Divide by the max if positive, else return zeros; idempotent."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0.0):
        raise ValueError("attention values must be non-negative")
    peak = raw.max() if raw.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(raw)
    return raw / peak


def upsample_bilinear(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize; target dims must cover the source."""
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2:
        raise DimensionError(f"upsample expects (h,w), got {src.shape}")
    h, w = src.shape
    if height < h or width < w:
        raise DimensionError(
            f"target {height}x{width} smaller than source {h}x{w}")
    rows = _source_coords(h, height)
    cols = _source_coords(w, width)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = src[np.ix_(r0, c0)] * (1.0 - fc) + src[np.ix_(r0, c1)] * fc
    bottom = src[np.ix_(r1, c0)] * (1.0 - fc) + src[np.ix_(r1, c1)] * fc
    return top * (1.0 - fr) + bottom * fr


def _source_coords(src_len: int, dst_len: int) -> np.ndarray:
    if src_len == 1 or dst_len == 1:
        return np.zeros(dst_len)
    return np.arange(dst_len) * ((src_len - 1) / (dst_len - 1))


def _map_peak(raw: np.ndarray, height: int, width: int) -> tuple[int, int]:
    """Raw argmax (row-major first on ties) mapped into the image frame."""
    rf, cf = np.unravel_index(int(np.argmax(raw)), raw.shape)
    h, w = raw.shape
    row = int(np.floor(rf * (height - 1) / (h - 1) + 0.5)) if h > 1 else 0
    col = int(np.floor(cf * (width - 1) / (w - 1) + 0.5)) if w > 1 else 0
    return row, col


def attention_for(image: Image, caption: str, encoders: DualEncoder) -> AttentionMap:
    """Full chain: feature gradients -> channel weights -> ReLU-weighted sum
    -> peak normalization -> bilinear upsampling to image resolution.

    An identically-zero map is returned flagged empty (``is_empty``), not
    raised: presence gating is the pipeline's decision.
    """
    grads, feats = encoders.feature_gradients_with_features(image, caption)
    alpha = channel_weights(grads)
    raw = raw_attention(feats, alpha)
    height, width = image.height, image.width
    up = upsample_bilinear(normalize_map(raw), height, width)
    return AttentionMap(
        raw=raw,
        normalized=normalize_map(up),
        peak=_map_peak(raw, height, width),
    )
