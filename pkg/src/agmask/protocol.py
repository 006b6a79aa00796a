"""Wire protocol for external model adapters.

Newline-delimited JSON over the adapter's stdin/stdout.  Tensors travel as
``{"shape": [...], "dtype": "f32"|"u8", "data": <base64 little-endian>}``.
Request: ``{"v":1, "op":..., "id":..., <op fields>}``; response echoes the
id with ``ok`` true (tensor fields) or false (``error`` string).  One
request is in flight per adapter process at a time.
"""

from __future__ import annotations

import base64
import binascii
import json
import queue
import subprocess
import threading

import numpy as np

from .errors import AgmaskError, FormatError

PROTOCOL_VERSION = 1
OPS = ("encode_image", "encode_text", "feature_gradients", "segment")

_DTYPES = {"f32": ("<f4", 4), "u8": ("u1", 1)}


class ProtocolError(FormatError):
    """Malformed protocol message (bad field, version, base64 or length)."""


class AdapterSpawnError(AgmaskError):
    """The adapter process could not be started."""


class AdapterTimeoutError(AgmaskError):
    """The adapter did not answer within the configured timeout."""


def encode_tensor(arr: np.ndarray, dtype: str) -> dict:
    """Pack an array as a tensor field; data is little-endian base64."""
    if dtype not in _DTYPES:
        raise ProtocolError(f"unknown tensor dtype {dtype!r}")
    np_dtype, _ = _DTYPES[dtype]
    raw = np.ascontiguousarray(arr).astype(np_dtype).tobytes()
    return {"shape": list(arr.shape), "dtype": dtype,
            "data": base64.b64encode(raw).decode("ascii")}


def decode_tensor(obj) -> np.ndarray:
    """Unpack and validate a tensor field (shape/length agreement)."""
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


def _check_envelope(doc, id_required=True) -> None:
    if not isinstance(doc, dict):
        raise ProtocolError("message must be a JSON object")
    if doc.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {doc.get('v')!r}")
    if id_required and not isinstance(doc.get("id"), str):
        raise ProtocolError("message id must be a string")


def encode_request(req: dict) -> str:
    """Validate and serialize a request to one line (no trailing newline)."""
    validate_request(req)
    return json.dumps(req, separators=(",", ":"))


def decode_request(line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed request JSON: {exc}") from exc
    validate_request(doc)
    return doc


def validate_request(doc: dict) -> None:
    _check_envelope(doc)
    op = doc.get("op")
    if op not in OPS:
        raise ProtocolError(f"unknown op {op!r}")
    if op in ("encode_image", "feature_gradients", "segment"):
        decode_tensor(doc.get("image"))
    if op in ("encode_text", "feature_gradients"):
        if not isinstance(doc.get("caption"), str):
            raise ProtocolError(f"op {op} requires a caption string")
    if op == "segment":
        from .prompting import prompt_from_json
        prompts = doc.get("prompts")
        if prompts is None:
            raise ProtocolError("op segment requires prompts")
        prompt_from_json(prompts)


def encode_response(resp: dict) -> str:
    validate_response(resp)
    return json.dumps(resp, separators=(",", ":"))


def decode_response(line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed response JSON: {exc}") from exc
    validate_response(doc)
    return doc


def validate_response(doc: dict) -> None:
    _check_envelope(doc)
    ok = doc.get("ok")
    if ok is True:
        for key, value in doc.items():
            if isinstance(value, dict) and "dtype" in value:
                decode_tensor(value)
    elif ok is False:
        if not isinstance(doc.get("error"), str):
            raise ProtocolError("error response requires an error string")
    else:
        raise ProtocolError("response must set ok to true or false")


def error_response(req_id: str, message: str) -> dict:
    return {"v": PROTOCOL_VERSION, "id": req_id, "ok": False, "error": message}


class AdapterClient:
    """Client side of the adapter protocol over a child process.

    A reader thread feeds stdout lines into a queue so requests can time
    out; requests are serialized with a lock (one in flight per process).
    """

    def __init__(self, command: list[str], timeout: float = 10.0):
        if not command:
            raise AdapterSpawnError("empty adapter command")
        if timeout <= 0:
            raise ValueError(f"timeout must be positive, got {timeout}")
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as exc:
            raise AdapterSpawnError(f"cannot start adapter {command!r}: {exc}") from exc
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)  # EOF sentinel

    def roundtrip(self, request: dict) -> dict:
        """Send one request, wait for its response; raises on timeout,
        protocol violations and id mismatches."""
        payload = encode_request(request)
        with self._lock:
            if self._proc.poll() is not None:
                raise AdapterSpawnError(
                    f"adapter exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(payload + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise AdapterSpawnError(f"adapter pipe closed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise AdapterTimeoutError(
                    f"no adapter response within {self.timeout}s") from None
        if line is None:
            raise AdapterSpawnError("adapter closed stdout before responding")
        response = decode_response(line)
        if response["id"] != request["id"]:
            raise ProtocolError(
                f"response id {response['id']!r} does not match request")
        return response

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "AdapterClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
