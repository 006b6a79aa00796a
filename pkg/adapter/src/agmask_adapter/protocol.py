"""Adapter-side codec for the JSON-lines tensor protocol.

Implemented against the wire contract only, deliberately independent of
the pipeline package: the newline-delimited JSON with base64 little-endian
tensors IS the interface between the two processes.
"""

from __future__ import annotations

import base64
import binascii
import json

import numpy as np

PROTOCOL_VERSION = 1
OPS = ("encode_image", "encode_text", "feature_gradients", "segment")

_DTYPES = {"f32": ("<f4", 4), "u8": ("u1", 1)}


class ProtocolError(ValueError):
    """Message violates the wire contract."""


def encode_tensor(arr: np.ndarray, dtype: str) -> dict:
    if dtype not in _DTYPES:
        raise ProtocolError(f"unknown tensor dtype {dtype!r}")
    np_dtype, _ = _DTYPES[dtype]
    raw = np.ascontiguousarray(arr).astype(np_dtype).tobytes()
    return {"shape": list(arr.shape), "dtype": dtype,
            "data": base64.b64encode(raw).decode("ascii")}


def decode_tensor(obj) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ProtocolError("tensor field must be an object")
    dtype = obj.get("dtype")
    if dtype not in _DTYPES:
        raise ProtocolError(f"unknown tensor dtype {dtype!r}")
    shape = obj.get("shape")
    if (not isinstance(shape, list)
            or not all(isinstance(d, int) and d >= 0 for d in shape)):
        raise ProtocolError(f"bad tensor shape {shape!r}")
    np_dtype, size = _DTYPES[dtype]
    try:
        raw = base64.b64decode(obj.get("data", ""), validate=True)
    except (binascii.Error, TypeError) as exc:
        raise ProtocolError(f"bad base64 tensor data: {exc}") from exc
    expected = int(np.prod(shape)) * size if shape else size
    if len(raw) != expected:
        raise ProtocolError(
            f"tensor payload length {len(raw)} != {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()


def parse_request(line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed request JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("request must be a JSON object")
    if doc.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {doc.get('v')!r}")
    if not isinstance(doc.get("id"), str):
        raise ProtocolError("request id must be a string")
    if doc.get("op") not in OPS:
        raise ProtocolError(f"unknown op {doc.get('op')!r}")
    return doc


def parse_prompts(obj) -> tuple[list[tuple[int, int]], tuple[int, int, int, int] | None]:
    """Prompt JSON -> (points, box); points are (x, y)."""
    if not isinstance(obj, dict) or obj.get("v") != 1:
        raise ProtocolError("prompts must be a v1 prompt object")
    kind = obj.get("kind")
    if kind == "points":
        pts = obj.get("points")
        if (not isinstance(pts, list) or not pts
                or not all(isinstance(p, list) and len(p) == 2
                           and all(isinstance(v, int) for v in p) for p in pts)):
            raise ProtocolError("bad points list")
        return [(p[0], p[1]) for p in pts], None
    if kind == "box":
        box = obj.get("box")
        if (not isinstance(box, list) or len(box) != 4
                or not all(isinstance(v, int) for v in box)):
            raise ProtocolError("bad box")
        return [], (box[0], box[1], box[2], box[3])
    raise ProtocolError(f"unknown prompt kind {kind!r}")


def ok_response(req_id: str, **tensor_fields) -> dict:
    doc = {"v": PROTOCOL_VERSION, "id": req_id, "ok": True}
    doc.update(tensor_fields)
    return doc


def error_response(req_id: str, message: str) -> dict:
    return {"v": PROTOCOL_VERSION, "id": req_id, "ok": False, "error": message}


def dump_line(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"))
