"""Contrastive fine-tuning of the dual encoder.

Each batch records every image/caption encoding on one tape, computes the
symmetric contrastive loss over the normalized embeddings analytically,
seeds the tape with its gradients and applies one Adam step per parameter.
Fully deterministic: shuffling, init and everything downstream run off the
explicit seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .dataset import ManifestEntry, load_manifest
from .encoders import DualEncoder, ImageEncoder, TextEncoder, contrastive_loss
from .errors import ConfigError
from .netpbm import load_ppm
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Trainer hyperparameters.

    Defaults follow the full-scale recipe (batch 64, lr 1e-5, 50 epochs,
    Adam betas (0.9, 0.98), weight decay 0.01); desk-scale runs override
    batch size and learning rate.  ``stratify_captions`` draws at most one
    sample per caption into a batch: with few distinct captions, duplicated
    captions otherwise appear as false negatives on the off-diagonal and
    floor the contrastive loss.
    """

    batch_size: int = 64
    learning_rate: float = 1e-5
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    temperature: float = 0.07
    seed: int = 0
    drop_incomplete: bool = False
    stratify_captions: bool = False
    feature_channels: int = 8
    embed_dim: int = 16
    token_dim: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def init_encoders(cfg: TrainConfig, captions: list[str]) -> DualEncoder:
    tokens = [tok for caption in captions for tok in caption.lower().split()]
    img = ImageEncoder.init(cfg.seed, feature_channels=cfg.feature_channels,
                            embed_dim=cfg.embed_dim)
    txt = TextEncoder.init(cfg.seed, tokens, token_dim=cfg.token_dim,
                           embed_dim=cfg.embed_dim)
    return DualEncoder(image_encoder=img, text_encoder=txt, seed=cfg.seed)


def _batches(pairs, cfg: TrainConfig, rng: SplitMix64) -> list[list[int]]:
    """Index batches for one epoch under the configured sampling scheme."""
    if cfg.stratify_captions:
        groups: dict[str, list[int]] = {}
        for i, (_, caption) in enumerate(pairs):
            groups.setdefault(caption, []).append(i)
        shuffled = [rng.sample_without_replacement(ids, len(ids))
                    for _, ids in sorted(groups.items())]
        rounds = max(len(ids) for ids in shuffled)
        batches = []
        for r in range(rounds):
            batch = [ids[r] for ids in shuffled if r < len(ids)]
            batches.append(rng.sample_without_replacement(batch, len(batch)))
        full_size = len(shuffled)
    else:
        order = rng.sample_without_replacement(list(range(len(pairs))), len(pairs))
        batches = [order[s:s + cfg.batch_size]
                   for s in range(0, len(order), cfg.batch_size)]
        full_size = min(cfg.batch_size, len(pairs))
    if cfg.drop_incomplete:
        batches = [b for b in batches if len(b) >= full_size]
    return [b for b in batches if b]


def _dataset_loss(dual: DualEncoder, pairs: list[tuple[nn.Tensor, str]],
                  temperature: float) -> float:
    """Mean contrastive loss over the dataset in full-batch chunks of 64."""
    losses = []
    for start in range(0, len(pairs), 64):
        chunk = pairs[start:start + 64]
        ei = np.stack([nn.normalize(nn.Tensor(
            dual.image_encoder.encode(x)[0].values)).data for x, _ in chunk])
        et = np.stack([nn.normalize(nn.Tensor(
            dual.text_encoder.encode(c).values)).data for _, c in chunk])
        loss, _, _ = contrastive_loss(ei, et, temperature)
        losses.append(loss * len(chunk))
    return float(sum(losses) / len(pairs))


def train(dataset: list[ManifestEntry] | str, checkpoint_path, cfg: TrainConfig,
          split: str | None = "train") -> tuple[DualEncoder, list[float]]:
    """Train on the manifest's ``split`` entries and write the checkpoint.

    Returns the trained encoders and the loss history: the pre-training
    dataset loss followed by each epoch's mean batch loss.  Zero epochs
    writes the untouched initialization.
    """
    entries = load_manifest(dataset) if isinstance(dataset, str) else list(dataset)
    if split is not None:
        entries = [e for e in entries if e.split == split]
    if not entries:
        raise ConfigError("training dataset is empty")
    if cfg.drop_incomplete and cfg.batch_size > len(entries):
        raise ConfigError(
            f"batch size {cfg.batch_size} exceeds dataset size {len(entries)} "
            "with drop_incomplete set")

    pairs = [(load_ppm(e.image_path).to_tensor(), e.caption) for e in entries]
    dual = init_encoders(cfg, [c for _, c in pairs])
    params = dual.params()
    states = {name: nn.AdamState.zeros(t.shape) for name, t in params.items()}

    history = [_dataset_loss(dual, pairs, cfg.temperature)]
    log.info("epoch 0 (init): loss %.6f over %d pairs", history[0], len(pairs))

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = SplitMix64(derive_seed(cfg.seed, f"epoch-{epoch}"))
        batch_losses = []
        for batch_ids in _batches(pairs, cfg, rng):
            batch = [pairs[i] for i in batch_ids]
            tape = nn.Tape()
            img_nodes, txt_nodes = [], []
            for x, caption in batch:
                v, _ = dual.image_encoder.forward_tape(tape, x)
                img_nodes.append(tape.normalize(v))
                t = dual.text_encoder.forward_tape(tape, caption)
                txt_nodes.append(tape.normalize(t))
            ei = np.stack([t.data for t in img_nodes])
            et = np.stack([t.data for t in txt_nodes])
            loss, g_img, g_txt = contrastive_loss(ei, et, cfg.temperature)
            batch_losses.append(loss)
            seeds = {}
            for node, g in zip(img_nodes, g_img):
                seeds[node] = g
            for node, g in zip(txt_nodes, g_txt):
                seeds[node] = g
            grads = tape.backward(seeds)
            params = dual.params()
            for name, tensor in params.items():
                new_t, states[name] = nn.adam_step(
                    tensor, grads[tensor], states[name], lr=cfg.learning_rate,
                    beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                    weight_decay=cfg.weight_decay)
                dual.set_param(name, new_t)
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else history[-1]
        history.append(epoch_loss)
        log.info("epoch %d/%d: loss %.6f (%.2fs)", epoch, cfg.epochs,
                 epoch_loss, time.perf_counter() - t0)

    if checkpoint_path is not None:
        dual.save(checkpoint_path)
    return dual, history
