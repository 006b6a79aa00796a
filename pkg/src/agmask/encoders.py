"""Toy vision-language dual encoder.

The image side is two 3x3 conv layers with ReLU, global average pooling and
a linear projection; the post-ReLU output of the second conv is the target
layer whose gradients feed the attention mapper.  The text side is a mean
of token embeddings followed by a projection.  Both sides project into the
same D-dimensional space; similarity is the dot product of the normalized
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, weights
from .errors import DimensionError, FormatError
from .netpbm import Image
from .rng import SplitMix64, derive_seed

UNK_TOKEN = "<unk>"


@dataclass
class Embedding:
    """D-dimensional embedding; ``normalized`` marks unit length."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError(f"embedding must be a vector, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding values must be finite")
        if self.normalized:
            norm = float(np.linalg.norm(self.values))
            if abs(norm - 1.0) > 1e-12:
                raise ValueError(f"normalized embedding has norm {norm}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SimilarityScore:
    """Cosine similarity of two unit embeddings, in [-1, 1]."""

    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or abs(self.value) > 1.0 + 1e-12:
            raise ValueError(f"similarity {self.value} outside [-1, 1]")


def normalize(e: Embedding) -> Embedding:
    """Scale to unit Euclidean norm; rejects near-zero vectors."""
    return Embedding(values=nn.normalize(nn.Tensor(e.values)).data, normalized=True)


def similarity(ev: Embedding, et: Embedding) -> SimilarityScore:
    """Dot product of two normalized embeddings."""
    if not (ev.normalized and et.normalized):
        raise ValueError("similarity requires normalized embeddings")
    if ev.dim != et.dim:
        raise DimensionError(f"embedding dims differ: {ev.dim} vs {et.dim}")
    return SimilarityScore(value=float(ev.values @ et.values))


def _gauss_tensor(rng: SplitMix64, shape: tuple[int, ...], std: float) -> nn.Tensor:
    vals = np.array([rng.gauss() for _ in range(int(np.prod(shape)))])
    return nn.Tensor((vals * std).reshape(shape))


class ImageEncoder:
    """conv(Cin->8, 3x3) / ReLU / conv(8->K, 3x3) / ReLU / GAP / linear(K->D)."""

    HIDDEN = 8

    def __init__(self, conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b):
        self.conv1_w = conv1_w
        self.conv1_b = conv1_b
        self.conv2_w = conv2_w
        self.conv2_b = conv2_b
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.in_channels = conv1_w.shape[1]
        self.feature_channels = conv2_w.shape[0]
        self.embed_dim = proj_w.shape[0]

    @classmethod
    def init(cls, seed: int, in_channels: int = 3, feature_channels: int = 8,
             embed_dim: int = 16) -> "ImageEncoder":
        # conv biases start slightly positive so no ReLU channel is born
        # dead (an all-dead target layer would make every embedding zero)
        rng = SplitMix64(derive_seed(seed, "image-encoder"))
        h = cls.HIDDEN
        return cls(
            conv1_w=_gauss_tensor(rng, (h, in_channels, 3, 3),
                                  math.sqrt(2.0 / (in_channels * 9))),
            conv1_b=nn.Tensor(np.full(h, 0.05)),
            conv2_w=_gauss_tensor(rng, (feature_channels, h, 3, 3),
                                  math.sqrt(2.0 / (h * 9))),
            conv2_b=nn.Tensor(np.full(feature_channels, 0.05)),
            proj_w=_gauss_tensor(rng, (embed_dim, feature_channels),
                                 math.sqrt(1.0 / feature_channels)),
            proj_b=nn.Tensor(np.zeros(embed_dim)),
        )

    def params(self) -> dict[str, nn.Tensor]:
        return {
            "img.conv1_w": self.conv1_w, "img.conv1_b": self.conv1_b,
            "img.conv2_w": self.conv2_w, "img.conv2_b": self.conv2_b,
            "img.proj_w": self.proj_w, "img.proj_b": self.proj_b,
        }

    def set_param(self, name: str, value: nn.Tensor) -> None:
        attr = name.split(".", 1)[1]
        setattr(self, attr, value)

    def feature_shape(self, height: int, width: int) -> tuple[int, int]:
        return height - 4, width - 4

    def _check_input(self, x: nn.Tensor) -> None:
        if x.data.ndim != 3 or x.shape[0] != self.in_channels:
            raise DimensionError(
                f"expected ({self.in_channels},H,W) input, got {x.shape}")
        if x.shape[1] < 5 or x.shape[2] < 5:
            raise DimensionError(f"spatial dims must be >= 5, got {x.shape[1:]}")

    def forward_tape(self, tape: nn.Tape, x: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """(embedding vector, target-layer features), recorded on the tape."""
        self._check_input(x)
        h = tape.relu(tape.conv2d(x, self.conv1_w, self.conv1_b))
        f = tape.relu(tape.conv2d(h, self.conv2_w, self.conv2_b))
        v = tape.linear(self.proj_w, self.proj_b, tape.global_avg_pool(f))
        return v, f

    def features(self, x: nn.Tensor) -> nn.Tensor:
        self._check_input(x)
        h = nn.relu(nn.conv2d(x, self.conv1_w, self.conv1_b))
        return nn.relu(nn.conv2d(h, self.conv2_w, self.conv2_b))

    def encode(self, image: Image | nn.Tensor) -> tuple[Embedding, nn.Tensor]:
        """Unnormalized embedding V plus the target-layer activations."""
        x = image.to_tensor() if isinstance(image, Image) else image
        f = self.features(x)
        v = nn.linear(self.proj_w, self.proj_b, nn.global_avg_pool(f))
        return Embedding(values=v.data), f


class TextEncoder:
    """Mean of token embeddings projected to the shared space.

    Tokenization is lowercase + whitespace split; unknown tokens map to a
    reserved UNK row.  Empty captions are rejected.
    """

    def __init__(self, vocab: dict[str, int], table, proj_w, proj_b):
        if UNK_TOKEN not in vocab:
            raise ValueError(f"vocab must reserve {UNK_TOKEN!r}")
        self.vocab = dict(vocab)
        self.table = table
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.token_dim = table.shape[1]
        self.embed_dim = proj_w.shape[0]

    @classmethod
    def init(cls, seed: int, tokens: list[str], token_dim: int = 16,
             embed_dim: int = 16) -> "TextEncoder":
        vocab = {UNK_TOKEN: 0}
        for tok in sorted(set(tokens) - {UNK_TOKEN}):
            vocab[tok] = len(vocab)
        rng = SplitMix64(derive_seed(seed, "text-encoder"))
        return cls(
            vocab=vocab,
            table=_gauss_tensor(rng, (len(vocab), token_dim), 1.0),
            proj_w=_gauss_tensor(rng, (embed_dim, token_dim),
                                 math.sqrt(1.0 / token_dim)),
            proj_b=nn.Tensor(np.zeros(embed_dim)),
        )

    def params(self) -> dict[str, nn.Tensor]:
        return {
            "txt.table": self.table,
            "txt.proj_w": self.proj_w,
            "txt.proj_b": self.proj_b,
        }

    def set_param(self, name: str, value: nn.Tensor) -> None:
        attr = name.split(".", 1)[1]
        setattr(self, attr, value)

    def tokenize(self, caption: str) -> list[int]:
        tokens = caption.lower().split()
        if not tokens:
            raise ValueError("caption is empty after tokenization")
        return [self.vocab.get(tok, self.vocab[UNK_TOKEN]) for tok in tokens]

    def forward_tape(self, tape: nn.Tape, caption: str) -> nn.Tensor:
        ids = self.tokenize(caption)
        pooled = tape.embedding_mean(self.table, ids)
        return tape.linear(self.proj_w, self.proj_b, pooled)

    def encode(self, caption: str) -> Embedding:
        ids = self.tokenize(caption)
        pooled = nn.embedding_mean(self.table, ids)
        return Embedding(values=nn.linear(self.proj_w, self.proj_b, pooled).data)


@dataclass
class DualEncoder:
    """Paired image/text encoders sharing one embedding space."""

    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    seed: int = 0

    def params(self) -> dict[str, nn.Tensor]:
        out = dict(self.image_encoder.params())
        out.update(self.text_encoder.params())
        return out

    def set_param(self, name: str, value: nn.Tensor) -> None:
        if name.startswith("img."):
            self.image_encoder.set_param(name, value)
        elif name.startswith("txt."):
            self.text_encoder.set_param(name, value)
        else:
            raise KeyError(name)

    def similarity_score(self, image: Image | nn.Tensor, caption: str) -> SimilarityScore:
        ev, _ = self.image_encoder.encode(image)
        et = self.text_encoder.encode(caption)
        return similarity(normalize(ev), normalize(et))

    def caption_scores(self, image: Image | nn.Tensor, captions: list[str]) -> np.ndarray:
        """Similarity of one image against many captions (image encoded once)."""
        ev, _ = self.image_encoder.encode(image)
        evn = normalize(ev)
        return np.array([similarity(evn, normalize(self.text_encoder.encode(c))).value
                         for c in captions])

    def feature_gradients(self, image: Image | nn.Tensor, caption: str) -> nn.Tensor:
        """d(similarity)/d(target-layer features), shape (K, Hf, Wf).

        Computed through GAP -> projection -> normalization -> dot; raises
        if the image embedding has (near-)zero norm.
        """
        return self.feature_gradients_with_features(image, caption)[0]

    def feature_gradients_with_features(
            self, image: Image | nn.Tensor, caption: str) -> tuple[nn.Tensor, nn.Tensor]:
        """(gradients, target-layer features) from a single forward pass."""
        x = image.to_tensor() if isinstance(image, Image) else image
        f = self.image_encoder.features(x)
        et = normalize(self.text_encoder.encode(caption))
        tape = nn.Tape()
        pooled = tape.global_avg_pool(f)
        v = tape.linear(self.image_encoder.proj_w, self.image_encoder.proj_b, pooled)
        ev = tape.normalize(v)
        score = tape.dot(ev, nn.Tensor(et.values))
        grads = tape.backward((score, np.asarray(1.0)))
        return nn.Tensor(grads[f]), f

    def save(self, path) -> None:
        meta = {
            "vocab": self.text_encoder.vocab,
            "dims": {
                "in_channels": self.image_encoder.in_channels,
                "feature_channels": self.image_encoder.feature_channels,
                "embed_dim": self.image_encoder.embed_dim,
                "token_dim": self.text_encoder.token_dim,
            },
            "seed": self.seed,
        }
        weights.save_weights(self.params(), meta, path)

    @classmethod
    def load(cls, path) -> "DualEncoder":
        params, meta = weights.load_weights(path)
        try:
            vocab = {tok: int(idx) for tok, idx in meta["vocab"].items()}
            seed = int(meta.get("seed", 0))
            img = ImageEncoder(
                conv1_w=params["img.conv1_w"], conv1_b=params["img.conv1_b"],
                conv2_w=params["img.conv2_w"], conv2_b=params["img.conv2_b"],
                proj_w=params["img.proj_w"], proj_b=params["img.proj_b"],
            )
            txt = TextEncoder(
                vocab=vocab, table=params["txt.table"],
                proj_w=params["txt.proj_w"], proj_b=params["txt.proj_b"],
            )
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint missing field {exc}") from exc
        return cls(image_encoder=img, text_encoder=txt, seed=seed)


def contrastive_loss(image_embeddings: np.ndarray, text_embeddings: np.ndarray,
                     temperature: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE over the NxN similarity matrix.

    Inputs are row-normalized embeddings; diagonal pairs are the positives.
    Returns (loss, d loss/d image_embeddings, d loss/d text_embeddings).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    ei = np.asarray(image_embeddings, dtype=np.float64)
    et = np.asarray(text_embeddings, dtype=np.float64)
    if ei.ndim != 2 or ei.shape != et.shape:
        raise DimensionError(f"embedding matrices disagree: {ei.shape} vs {et.shape}")
    n = ei.shape[0]
    if n < 1:
        raise DimensionError("need at least one pair")
    for name, m in (("image", ei), ("text", et)):
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"{name} embeddings must be normalized")
    logits = (ei @ et.T) / temperature
    # row-wise softmax (image -> text) and column-wise (text -> image)
    row = logits - logits.max(axis=1, keepdims=True)
    p_row = np.exp(row)
    p_row /= p_row.sum(axis=1, keepdims=True)
    col = logits - logits.max(axis=0, keepdims=True)
    p_col = np.exp(col)
    p_col /= p_col.sum(axis=0, keepdims=True)
    diag = np.arange(n)
    loss_i = -np.log(np.maximum(p_row[diag, diag], 1e-300)).mean()
    loss_t = -np.log(np.maximum(p_col[diag, diag], 1e-300)).mean()
    loss = 0.5 * (loss_i + loss_t)
    eye = np.eye(n)
    d_logits = ((p_row - eye) + (p_col - eye)) / (2.0 * n)
    g_image = d_logits @ et / temperature
    g_text = d_logits.T @ ei / temperature
    return float(loss), g_image, g_text
