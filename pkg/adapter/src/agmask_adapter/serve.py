"""Request loop: one JSON line in, one JSON line out.

Models are built once at startup (failing fast on bad identifiers); every
per-request failure turns into an ok=false response so the loop survives
malformed input.
"""

from __future__ import annotations

import logging
import sys

from .models import AdapterConfig, VisionLanguageModel, build_segmenter
from .protocol import (
    ProtocolError, decode_tensor, dump_line, encode_tensor, error_response,
    ok_response, parse_prompts, parse_request,
)

log = logging.getLogger("agmask_adapter")


class AdapterServer:
    def __init__(self, config: AdapterConfig):
        self.config = config
        self.vision = VisionLanguageModel(config)
        self.segmenter = build_segmenter(config)

    def handle(self, request: dict) -> dict:
        op = request["op"]
        req_id = request["id"]
        if op == "encode_image":
            embedding, features = self.vision.encode_image(
                decode_tensor(request.get("image")))
            return ok_response(req_id,
                               embedding=encode_tensor(embedding, "f32"),
                               features=encode_tensor(features, "f32"))
        if op == "encode_text":
            caption = request.get("caption")
            if not isinstance(caption, str):
                raise ProtocolError("encode_text requires a caption string")
            return ok_response(req_id, embedding=encode_tensor(
                self.vision.encode_text(caption), "f32"))
        if op == "feature_gradients":
            caption = request.get("caption")
            if not isinstance(caption, str):
                raise ProtocolError("feature_gradients requires a caption string")
            grads, features = self.vision.feature_gradients(
                decode_tensor(request.get("image")), caption)
            return ok_response(req_id,
                               gradients=encode_tensor(grads, "f32"),
                               features=encode_tensor(features, "f32"))
        if op == "segment":
            image = decode_tensor(request.get("image"))
            if "prompts" not in request:
                raise ProtocolError("segment requires prompts")
            points, box = parse_prompts(request["prompts"])
            mask = self.segmenter.segment(image, points, box)
            return ok_response(req_id, mask=encode_tensor(mask, "u8"))
        raise ProtocolError(f"unknown op {op!r}")

    def serve(self, stdin=None, stdout=None) -> None:
        """Loop until EOF; never raises on a bad request."""
        stdin = stdin if stdin is not None else sys.stdin
        stdout = stdout if stdout is not None else sys.stdout
        for line in stdin:
            line = line.strip()
            if not line:
                continue
            req_id = ""
            try:
                request = parse_request(line)
                req_id = request["id"]
                response = self.handle(request)
            except Exception as exc:  # per-request fault isolation
                log.warning("request failed: %s", exc)
                response = error_response(req_id, str(exc))
            stdout.write(dump_line(response) + "\n")
            stdout.flush()
