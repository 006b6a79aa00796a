"""End-to-end orchestration: score, gate, attend, prompt, segment.

Per-image prompt sampling is seeded by folding the sample id into the
global seed, so batch results are identical for any worker count or
scheduling order.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import ManifestEntry
from .encoders import DualEncoder
from .errors import ConfigError, NoActivationError
from .gradcam import attention_for
from .netpbm import Image, load_mask_pgm, load_ppm
from .prompting import (
    PromptConfig, PromptSet, prompt_to_json, to_bbox_prompt, to_point_prompts,
    to_single_point_prompt,
)
from .protocol import AdapterClient
from .rng import derive_seed
from .segmenter import Mask, SegmenterConfig, segment

log = logging.getLogger(__name__)

PROMPT_MODES = ("single", "multi", "box")


@dataclass
class PipelineConfig:
    """Everything a full run needs; the gate defaults to the shipped
    operating point 0.489."""

    checkpoint: str = ""
    similarity_gate: float = 0.489
    prompt_mode: str = "multi"
    prompting: PromptConfig = field(default_factory=PromptConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not -1.0 <= self.similarity_gate <= 1.0:
            raise ConfigError(
                f"similarity_gate must be in [-1, 1], got {self.similarity_gate}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(
                f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class RunResult:
    """Outcome of one image/caption run.

    Prompts and mask are set only when the object passed the gate and the
    attention map was usable; ``warning`` records a degenerate-but-handled
    condition (currently only "no_activation").
    """

    sample_id: str
    similarity: float
    present: bool
    prompts: PromptSet | None
    mask: Mask | None
    mask_path: str | None
    timings: dict[str, float]
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "similarity": round(self.similarity, 6),
            "present": self.present,
            "prompts": None if self.prompts is None
            else json.loads(prompt_to_json(self.prompts)),
            "mask": self.mask_path,
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "warning": self.warning,
        }


class _StageClock:
    """Contiguous stage spans: the per-stage times telescope to the total."""

    def __init__(self):
        self.start = time.perf_counter()
        self._last = self.start
        self.timings: dict[str, float] = {}

    def mark(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = now - self._last
        self._last = now

    def finish(self) -> dict[str, float]:
        self.timings["total"] = time.perf_counter() - self.start
        return self.timings


class Pipeline:
    """Loads the checkpoint once and runs images through the full chain."""

    def __init__(self, config: PipelineConfig, encoders: DualEncoder | None = None):
        self.config = config
        if encoders is not None:
            self.encoders = encoders
        else:
            if not config.checkpoint:
                raise ConfigError("pipeline requires a checkpoint path")
            if not Path(config.checkpoint).exists():
                raise ConfigError(f"checkpoint not found: {config.checkpoint}")
            self.encoders = DualEncoder.load(config.checkpoint)
        self._image_cache: dict[str, Image] = {}
        self._cache_lock = threading.Lock()

    def _load_image(self, path) -> Image:
        key = str(path)
        with self._cache_lock:
            cached = self._image_cache.get(key)
        if cached is not None:
            return cached
        image = load_ppm(path)
        with self._cache_lock:
            self._image_cache[key] = image
        return image

    def prompts_for(self, attention, mode: str, sample_id: str) -> PromptSet:
        cfg = replace(self.config.prompting,
                      seed=derive_seed(self.config.seed, sample_id))
        if mode == "single":
            return to_single_point_prompt(attention)
        if mode == "multi":
            return to_point_prompts(attention, cfg)
        return to_bbox_prompt(attention, cfg)

    def run(self, image: Image, caption: str, sample_id: str = "sample",
            mask_out=None, mode: str | None = None,
            client: AdapterClient | None = None) -> RunResult:
        """Score, gate at the similarity threshold, then attend, prompt,
        segment and optionally write the mask PGM.

        Stages short-circuit when the gate fails; an identically-zero
        attention map downgrades to present=false with a warning.
        """
        mode = mode or self.config.prompt_mode
        clock = _StageClock()
        score = self.encoders.similarity_score(image, caption).value
        clock.mark("encode")
        present = score >= self.config.similarity_gate
        if not present:
            log.info("%s: similarity %.4f below gate %.4f", sample_id, score,
                     self.config.similarity_gate)
            return RunResult(sample_id=sample_id, similarity=score, present=False,
                             prompts=None, mask=None, mask_path=None,
                             timings=clock.finish())
        attention = attention_for(image, caption, self.encoders)
        clock.mark("attend")
        try:
            prompts = self.prompts_for(attention, mode, sample_id)
        except NoActivationError:
            clock.mark("prompt")
            log.warning("%s: attention map empty, reporting absent", sample_id)
            return RunResult(sample_id=sample_id, similarity=score, present=False,
                             prompts=None, mask=None, mask_path=None,
                             timings=clock.finish(), warning="no_activation")
        clock.mark("prompt")
        mask = segment(image, prompts, self.config.segmenter, client=client,
                       request_id=sample_id)
        clock.mark("segment")
        mask_path = None
        if mask_out is not None:
            mask.save(mask_out)
            mask_path = str(mask_out)
            clock.mark("write")
        return RunResult(sample_id=sample_id, similarity=score, present=True,
                         prompts=prompts, mask=mask, mask_path=mask_path,
                         timings=clock.finish())

    def run_entries(self, entries: list[ManifestEntry],
                    modes: tuple[str, ...] | None = None
                    ) -> dict[tuple[str, str], RunResult]:
        """Run every (entry, mode) pair on the worker pool.

        Results are keyed (sample id, mode); identical for any worker
        count because per-sample seeds depend only on the global seed and
        the id.  With the external backend every worker owns one adapter
        process.
        """
        modes = tuple(modes) if modes else (self.config.prompt_mode,)
        local = threading.local()
        clients: list[AdapterClient] = []

        def get_client() -> AdapterClient | None:
            if self.config.segmenter.backend != "external":
                return None
            if not hasattr(local, "client"):
                local.client = AdapterClient(
                    self.config.segmenter.external_command,
                    timeout=self.config.segmenter.timeout)
                clients.append(local.client)
            return local.client

        def task(entry: ManifestEntry, mode: str):
            image = self._load_image(entry.image_path)
            result = self.run(image, entry.caption, sample_id=entry.id,
                              mode=mode, client=get_client())
            return (entry.id, mode), result

        results: dict[tuple[str, str], RunResult] = {}
        try:
            if self.config.workers == 1:
                for entry in entries:
                    for mode in modes:
                        key, result = task(entry, mode)
                        results[key] = result
            else:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    futures = [pool.submit(task, entry, mode)
                               for entry in entries for mode in modes]
                    for future in futures:
                        key, result = future.result()
                        results[key] = result
        finally:
            for client in clients:
                client.close()
        return results

    def caption_scores(self, entry: ManifestEntry, captions: list[str]) -> np.ndarray:
        image = self._load_image(entry.image_path)
        return self.encoders.caption_scores(image, captions)

    def truth_mask(self, entry: ManifestEntry) -> Mask:
        return Mask(pixels=load_mask_pgm(entry.mask_path))
