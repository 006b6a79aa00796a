"""Model backends served over the protocol.

Vision-language: a torchvision ResNet trunk hooked at its final conv stage
(layer4) with a linear projection head, paired with a hashed-token text
encoder — fine-tuned weights load from a state-dict path.  Segmentation:
Segment Anything when the package and a checkpoint are available, plus a
built-in color-threshold segmenter so the adapter runs hermetically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.models import resnet18, resnet50

BACKBONES = {"resnet18": (resnet18, 512), "resnet50": (resnet50, 2048)}


@dataclass
class AdapterConfig:
    """Model identifiers, device and protocol pin.

    ``vision`` is "resnet18"/"resnet50" with an optional ":<state_dict.pt>"
    suffix; ``segmenter`` is "threshold[:tolerance]" or
    "sam:<checkpoint>[:<model_type>]".
    """

    vision: str = "resnet18"
    segmenter: str = "threshold"
    device: str = "cpu"
    embed_dim: int = 64
    image_size: int = 224
    seed: int = 0
    protocol_version: int = 1

    def __post_init__(self):
        if self.protocol_version != 1:
            raise ValueError(f"unsupported protocol version {self.protocol_version}")


def _hash_token(token: str, buckets: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


class VisionLanguageModel:
    """ResNet image tower + hashed-embedding text tower, shared space."""

    VOCAB_BUCKETS = 4096
    TOKEN_DIM = 128

    def __init__(self, config: AdapterConfig):
        spec = config.vision
        name, _, weights_path = spec.partition(":")
        if name not in BACKBONES:
            raise ValueError(f"unknown vision backbone {name!r} "
                             f"(expected one of {sorted(BACKBONES)})")
        factory, trunk_dim = BACKBONES[name]
        self.device = torch.device(config.device)
        self.image_size = config.image_size
        torch.manual_seed(config.seed)
        self.backbone = factory(weights=None)
        self.backbone.fc = torch.nn.Identity()
        self.image_proj = torch.nn.Linear(trunk_dim, config.embed_dim)
        self.token_table = torch.nn.Embedding(self.VOCAB_BUCKETS, self.TOKEN_DIM)
        self.text_proj = torch.nn.Linear(self.TOKEN_DIM, config.embed_dim)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu",
                               weights_only=True)
            self.load_state_dict(state)
        for module in self.modules():
            module.to(self.device)
            module.eval()

    def modules(self):
        return (self.backbone, self.image_proj, self.token_table, self.text_proj)

    def state_dict(self) -> dict:
        return {
            "backbone": self.backbone.state_dict(),
            "image_proj": self.image_proj.state_dict(),
            "token_table": self.token_table.state_dict(),
            "text_proj": self.text_proj.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.backbone.load_state_dict(state["backbone"])
        self.image_proj.load_state_dict(state["image_proj"])
        self.token_table.load_state_dict(state["token_table"])
        self.text_proj.load_state_dict(state["text_proj"])

    def _prepare(self, image_u8: np.ndarray) -> torch.Tensor:
        if image_u8.ndim != 3 or image_u8.shape[0] != 3:
            raise ValueError(f"image must be (3,H,W) u8, got {image_u8.shape}")
        x = torch.from_numpy(image_u8.astype(np.float32) / 255.0)
        x = x.unsqueeze(0).to(self.device)
        return F.interpolate(x, size=(self.image_size, self.image_size),
                             mode="bilinear", align_corners=False)

    def _forward_with_features(self, x: torch.Tensor):
        captured = {}

        def hook(module, inputs, output):
            if torch.is_grad_enabled() and output.requires_grad:
                output.retain_grad()
            captured["features"] = output

        handle = self.backbone.layer4.register_forward_hook(hook)
        try:
            pooled = self.backbone(x)
        finally:
            handle.remove()
        embedding = self.image_proj(pooled).squeeze(0)
        return embedding, captured["features"]

    @torch.no_grad()
    def encode_image(self, image_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(embedding (D,), target-layer features (K,Hf,Wf)) as float32."""
        embedding, features = self._forward_with_features(self._prepare(image_u8))
        return (embedding.cpu().numpy().astype(np.float32),
                features.squeeze(0).cpu().numpy().astype(np.float32))

    def _text_embedding(self, caption: str) -> torch.Tensor:
        tokens = caption.lower().split()
        if not tokens:
            raise ValueError("caption is empty after tokenization")
        ids = torch.tensor([_hash_token(t, self.VOCAB_BUCKETS) for t in tokens],
                           device=self.device)
        pooled = self.token_table(ids).mean(dim=0)
        return self.text_proj(pooled)

    @torch.no_grad()
    def encode_text(self, caption: str) -> np.ndarray:
        return self._text_embedding(caption).cpu().numpy().astype(np.float32)

    def feature_gradients(self, image_u8: np.ndarray,
                          caption: str) -> tuple[np.ndarray, np.ndarray]:
        """d(cosine similarity)/d(layer4 features) plus the features."""
        x = self._prepare(image_u8)
        with torch.enable_grad():
            embedding, features = self._forward_with_features(x)
            text = self._text_embedding(caption).detach()
            score = F.cosine_similarity(embedding, text, dim=0)
            score.backward()
        grads = features.grad.squeeze(0).cpu().numpy().astype(np.float32)
        feats = features.detach().squeeze(0).cpu().numpy().astype(np.float32)
        return grads, feats


class ThresholdSegmenter:
    """Built-in stand-in: mask = pixels within a color tolerance of the
    prompt seeds (box prompts threshold against the box-center color,
    restricted to the box)."""

    def __init__(self, tolerance: float = 40.0, device: str = "cpu"):
        self.tolerance = float(tolerance)
        self.device = torch.device(device)

    @torch.no_grad()
    def segment(self, image_u8: np.ndarray, points, box) -> np.ndarray:
        img = torch.from_numpy(image_u8.astype(np.float32)).to(self.device)
        _, height, width = img.shape
        if box is not None:
            x0, y0, x1, y1 = box
            if not (0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height):
                raise ValueError(f"box {box} outside {width}x{height} image")
            cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
            seed_colors = img[:, cy, cx].reshape(3, 1)
        else:
            for x, y in points:
                if not (0 <= x < width and 0 <= y < height):
                    raise ValueError(f"point ({x},{y}) outside image")
            seed_colors = torch.stack([img[:, y, x] for x, y in points], dim=1)
        flat = img.reshape(3, -1)
        dist = torch.cdist(flat.T, seed_colors.T)
        mask = (dist.min(dim=1).values <= self.tolerance).reshape(height, width)
        if box is not None:
            clip = torch.zeros_like(mask)
            clip[y0:y1 + 1, x0:x1 + 1] = True
            mask &= clip
        return (mask.cpu().numpy().astype(np.uint8)) * 255


class SamSegmenter:
    """Segment Anything backend; needs the package and a checkpoint."""

    def __init__(self, checkpoint: str, model_type: str = "vit_b",
                 device: str = "cpu"):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise RuntimeError(
                "segment-anything is not installed; install the 'sam' extra"
            ) from exc
        sam = sam_model_registry[model_type](checkpoint=checkpoint)
        sam.to(device)
        self.predictor = SamPredictor(sam)

    def segment(self, image_u8: np.ndarray, points, box) -> np.ndarray:
        hwc = np.ascontiguousarray(image_u8.transpose(1, 2, 0))
        self.predictor.set_image(hwc)
        kwargs = {}
        if points:
            kwargs["point_coords"] = np.array(points, dtype=np.float64)
            kwargs["point_labels"] = np.ones(len(points), dtype=np.int64)
        if box is not None:
            kwargs["box"] = np.array(box, dtype=np.float64)[None, :]
        masks, scores, _ = self.predictor.predict(multimask_output=True, **kwargs)
        best = masks[int(np.argmax(scores))]
        return best.astype(np.uint8) * 255


def build_segmenter(config: AdapterConfig):
    spec = config.segmenter
    name, _, rest = spec.partition(":")
    if name == "threshold":
        tolerance = float(rest) if rest else 40.0
        return ThresholdSegmenter(tolerance=tolerance, device=config.device)
    if name == "sam":
        checkpoint, _, model_type = rest.partition(":")
        if not checkpoint:
            raise ValueError("sam segmenter needs 'sam:<checkpoint>[:<type>]'")
        return SamSegmenter(checkpoint, model_type or "vit_b",
                            device=config.device)
    raise ValueError(f"unknown segmenter {name!r} (expected threshold or sam)")
