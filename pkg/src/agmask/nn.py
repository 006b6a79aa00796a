"""Dense-tensor numerics with tape-based reverse-mode differentiation.

The networks differentiated here are tiny (two conv layers and a couple of
projections), so every op has a hand-written backward rule recorded on an
explicit :class:`Tape`.  All math is float64 and pure: same inputs produce
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AgmaskError, DegenerateEmbeddingError, DimensionError


class UnrecordedNodeError(AgmaskError):
    """Gradient requested for a tensor the tape never saw."""


class Tensor:
    """Immutable dense array of float64 values.

    NaN/Inf are rejected at construction; the backing array is marked
    read-only so ops cannot alias-mutate each other's results.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Take ownership of a freshly computed array (no copy)."""
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _check_spatial(name: str, h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise DimensionError(f"{name}: empty spatial dims {h}x{w}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """(C,Hp,Wp) -> (C,kh,kw,Ho,Wo) patch view, copied for contiguity."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride,
                               j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlate (C,H,W) input with (K,C,kh,kw) weights plus bias.

    Output spatial dims are floor((H + 2*padding - kh) / stride) + 1.
    """
    out, _ = _conv2d_forward(x, w, b, stride, padding)
    return out


def _conv2d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int,
                    padding: int):
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError("conv2d expects x(C,H,W), w(K,C,kh,kw), b(K)")
    c, h, wdt = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weights {cw}")
    if b.shape != (k,):
        raise DimensionError(f"conv2d bias length {b.shape} != {k}")
    if stride < 1:
        raise DimensionError("conv2d stride must be positive")
    if padding < 0:
        raise DimensionError("conv2d padding must be non-negative")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 1, 2]))
    out += b.data[:, None, None]
    return Tensor._wrap(out), cols


def _conv2d_backward(g: np.ndarray, x: Tensor, w: Tensor, cols: np.ndarray,
                     stride: int, padding: int):
    k, cw, kh, kw = w.shape
    c, h, wdt = x.shape
    ho, wo = g.shape[1], g.shape[2]
    gw = np.tensordot(g, cols, axes=([1, 2], [3, 4]))        # (K,C,kh,kw)
    gb = g.sum(axis=(1, 2))
    gxp = np.zeros((c, h + 2 * padding, wdt + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                np.tensordot(w.data[:, :, i, j], g, axes=(0, 0)))
    if padding:
        gx = gxp[:, padding:-padding, padding:-padding]
    else:
        gx = gxp
    return gx, gw, gb


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    return Tensor._wrap(np.maximum(x.data, 0.0))


def global_avg_pool(x: Tensor) -> Tensor:
    """(K,H,W) -> (K,) per-channel mean."""
    if x.data.ndim != 3:
        raise DimensionError("global_avg_pool expects (K,H,W)")
    _check_spatial("global_avg_pool", x.shape[1], x.shape[2])
    return Tensor._wrap(x.data.mean(axis=(1, 2)))


def linear(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """W @ x + b with W of shape (D,N), x of shape (N,)."""
    if w.data.ndim != 2 or x.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("linear expects w(D,N), b(D), x(N)")
    d, n = w.shape
    if x.shape != (n,) or b.shape != (d,):
        raise DimensionError(
            f"linear shape mismatch: w{w.shape}, b{b.shape}, x{x.shape}")
    return Tensor._wrap(w.data @ x.data + b.data)


def normalize(x: Tensor) -> Tensor:
    """x / ||x||; raises on (near-)zero vectors."""
    if x.data.ndim != 1:
        raise DimensionError("normalize expects a vector")
    norm = float(np.linalg.norm(x.data))
    if norm <= 1e-12:
        raise DegenerateEmbeddingError(f"cannot normalize vector of norm {norm}")
    return Tensor._wrap(x.data / norm)


def dot(u: Tensor, v: Tensor) -> Tensor:
    """Inner product of two equal-length vectors; returns a scalar tensor."""
    if u.shape != v.shape or u.data.ndim != 1:
        raise DimensionError(f"dot shape mismatch: {u.shape} vs {v.shape}")
    return Tensor._wrap(np.asarray(u.data @ v.data))


def embedding_mean(table: Tensor, ids: list[int]) -> Tensor:
    """Mean of the table rows selected by ids; (V,Dt) -> (Dt,)."""
    if table.data.ndim != 2:
        raise DimensionError("embedding_mean expects a (V,Dt) table")
    if not ids:
        raise DimensionError("embedding_mean needs at least one index")
    return Tensor._wrap(table.data[ids].mean(axis=0))


class Grads:
    """Gradient lookup for a finished backward pass, keyed by identity."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._grads[id(t)]
        except KeyError:
            raise UnrecordedNodeError(
                "gradient requested for a tensor not recorded on this tape"
            ) from None

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Composition record: forward ops append (inputs, output, backward) nodes.

    One tape is used by one logical thread at a time; tensors themselves are
    immutable and may be shared between tapes.
    """

    def __init__(self):
        # each record: (output, [inputs], backward_fn(g_out) -> [g_inputs])
        self._records = []
        self._tensors: dict[int, Tensor] = {}

    def _record(self, out: Tensor, inputs: list[Tensor], backward) -> Tensor:
        self._records.append((out, inputs, backward))
        for t in inputs + [out]:
            self._tensors[id(t)] = t
        return out

    def conv2d(self, x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
               padding: int = 0) -> Tensor:
        out, cols = _conv2d_forward(x, w, b, stride, padding)

        def backward(g):
            return _conv2d_backward(g, x, w, cols, stride, padding)

        return self._record(out, [x, w, b], backward)

    def relu(self, x: Tensor) -> Tensor:
        out = relu(x)
        mask = x.data > 0.0
        return self._record(out, [x], lambda g: (g * mask,))

    def global_avg_pool(self, x: Tensor) -> Tensor:
        out = global_avg_pool(x)
        _, h, w = x.shape

        def backward(g):
            return (np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy(),)

        return self._record(out, [x], backward)

    def linear(self, w: Tensor, b: Tensor, x: Tensor) -> Tensor:
        out = linear(w, b, x)

        def backward(g):
            return (np.outer(g, x.data), g.copy(), w.data.T @ g)

        return self._record(out, [w, b, x], backward)

    def normalize(self, x: Tensor) -> Tensor:
        out = normalize(x)
        norm = float(np.linalg.norm(x.data))

        def backward(g):
            return (g / norm - x.data * (x.data @ g) / norm ** 3,)

        return self._record(out, [x], backward)

    def dot(self, u: Tensor, v: Tensor) -> Tensor:
        out = dot(u, v)

        def backward(g):
            return (g * v.data, g * u.data)

        return self._record(out, [u, v], backward)

    def embedding_mean(self, table: Tensor, ids: list[int]) -> Tensor:
        out = embedding_mean(table, ids)
        ids = list(ids)

        def backward(g):
            gt = np.zeros(table.shape)
            np.add.at(gt, ids, g / len(ids))
            return (gt,)

        return self._record(out, [table], backward)

    def backward(self, seeds: dict[Tensor, np.ndarray] | tuple[Tensor, np.ndarray]) -> Grads:
        """Reverse sweep from seed gradients.

        ``seeds`` maps recorded tensors to their upstream gradients (or is a
        single (tensor, gradient) pair).  Returns gradients for every tensor
        that took part in a recorded op; anything else raises on lookup.
        """
        if isinstance(seeds, tuple):
            seeds = {seeds[0]: seeds[1]}
        grads: dict[int, np.ndarray] = {}
        for t, g in seeds.items():
            if id(t) not in self._tensors:
                raise UnrecordedNodeError("seed tensor was not recorded on this tape")
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.shape:
                raise DimensionError(
                    f"seed gradient shape {g.shape} != tensor shape {t.shape}")
            grads[id(t)] = grads.get(id(t), 0.0) + g
        for out, inputs, backward in reversed(self._records):
            g_out = grads.get(id(out))
            if g_out is None:
                g_out = np.zeros(out.shape)
            g_inputs = backward(g_out)
            for t, g in zip(inputs, g_inputs):
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g
        # participants that received nothing still get explicit zeros
        for key, t in self._tensors.items():
            if key not in grads:
                grads[key] = np.zeros(t.shape)
        return Grads(grads)


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), step=0)

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise DimensionError("Adam moment shapes disagree")
        if self.step < 0:
            raise ValueError("Adam step counter must be >= 0")


def adam_step(params: Tensor, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8,
              weight_decay: float = 0.01) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Pure: returns the new parameters and state, leaving inputs untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.shape or state.m.shape != params.shape:
        raise DimensionError("adam_step shapes disagree")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_p = params.data - lr * weight_decay * params.data \
        - lr * m_hat / (np.sqrt(v_hat) + eps)
    return Tensor._wrap(new_p), AdamState(m=m, v=v, step=t)
