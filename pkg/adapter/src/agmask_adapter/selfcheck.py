"""Diagnostic checks: protocol echo, tensor round-trip, model availability."""

from __future__ import annotations

import platform
import sys

import numpy as np

from .models import AdapterConfig, VisionLanguageModel, build_segmenter
from .protocol import decode_tensor, dump_line, encode_tensor, parse_request


def _check_protocol_echo() -> None:
    request = {"v": 1, "op": "encode_text", "id": "echo-1", "caption": "red box"}
    parsed = parse_request(dump_line(request))
    if parsed != request:
        raise AssertionError("request did not survive an encode/decode cycle")


def _check_tensor_roundtrip() -> None:
    rng = np.random.default_rng(1234)
    f32 = rng.standard_normal((4, 5, 6)).astype(np.float32)
    back = decode_tensor(encode_tensor(f32, "f32"))
    if back.tobytes() != f32.tobytes():
        raise AssertionError("f32 tensor round-trip is not exact")
    u8 = rng.integers(0, 256, size=(7, 9), dtype=np.uint8)
    if decode_tensor(encode_tensor(u8, "u8")).tobytes() != u8.tobytes():
        raise AssertionError("u8 tensor round-trip is not exact")


def _check_models(config: AdapterConfig) -> None:
    vision = VisionLanguageModel(config)
    segmenter = build_segmenter(config)
    probe = np.zeros((3, 64, 64), dtype=np.uint8)
    probe[:, 16:48, 16:48] = 200
    embedding, features = vision.encode_image(probe)
    grads, feats = vision.feature_gradients(probe, "white square")
    if grads.shape != feats.shape:
        raise AssertionError(
            f"gradients shape {grads.shape} != features shape {feats.shape}")
    mask = segmenter.segment(probe, [(32, 32)], None)
    if mask.shape != (64, 64):
        raise AssertionError(f"segmenter returned {mask.shape}, expected (64, 64)")


def run_selfcheck(config: AdapterConfig, out=None) -> int:
    """Run all checks, print one line each plus versions; 0 iff all pass."""
    import torch
    import torchvision

    from . import __version__

    out = out if out is not None else sys.stdout
    print(f"agmask-adapter {__version__} | python {platform.python_version()} "
          f"| numpy {np.__version__} | torch {torch.__version__} "
          f"| torchvision {torchvision.__version__} | device {config.device}",
          file=out)
    checks = [
        ("protocol-echo", _check_protocol_echo),
        ("tensor-roundtrip", _check_tensor_roundtrip),
        ("model-availability "
         f"(vision={config.vision!r}, segmenter={config.segmenter!r})",
         lambda: _check_models(config)),
    ]
    failures = 0
    for name, check in checks:
        try:
            check()
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}", file=out)
        else:
            print(f"ok   {name}", file=out)
    return 1 if failures else 0
