"""Weights persistence.

File layout: magic bytes ``AGMW1\\n``, one UTF-8 JSON header line listing
ordered parameter names/shapes plus a free-form metadata object, then the
raw little-endian float64 payload concatenated in header order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import Tensor

MAGIC = b"AGMW1\n"


def save_weights(params: dict[str, Tensor], meta: dict, path) -> None:
    """Write parameters in dict order; byte-identical for identical inputs."""
    entries = [{"name": name, "shape": list(t.shape)} for name, t in params.items()]
    header = json.dumps({"params": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":"))
    blob = bytearray()
    blob += MAGIC
    blob += header.encode("utf-8")
    blob += b"\n"
    for t in params.values():
        blob += t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_weights(path) -> tuple[dict[str, Tensor], dict]:
    """Read back (ordered params, meta); validates magic, header and length."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic, not an AGMW1 weights file")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or "params" not in header:
        raise FormatError(f"{path}: header missing params list")
    payload = data[nl + 1:]
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated payload at parameter {name!r}")
        params[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape))
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing bytes")
    return params, header.get("meta", {})
