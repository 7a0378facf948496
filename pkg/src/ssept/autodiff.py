"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the SSE-PT network needs are provided. Every op accepts
tensors with optional leading batch axes and acts on the trailing one or two
axes; there is no general broadcasting.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = sum_all(y)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-8


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the compute graph (non-scalar loss, double backward)."""


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations (the compute graph).

    Nodes are appended in execution order, so every node's inputs precede it;
    :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this tape; call reset() first")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g_out = node.output.grad
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                # out-of-place accumulation: g may alias another node's gradient
                inp.grad = g if inp.grad is None else inp.grad + g


_TAPES: list[Tape] = []


@contextmanager
def no_tape():
    """Temporarily suspend recording, e.g. for inference inside a training loop."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES[:] = saved


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, inputs, out, backward))
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sums the leading axes of g that were implicitly repeated
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes; ``b`` may be 2-D and shared across a's batch."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), A @ B, backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {x.shape}")
    return _record("transpose", (x,), np.swapaxes(x.data, -1, -2).copy(),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may match a trailing suffix of ``a``'s shape (bias add)."""
    if a.shape[a.data.ndim - b.data.ndim:] != b.shape or b.data.ndim > a.data.ndim:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    b_shape = b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (g, _reduce_to(g, b_shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _record("relu", (x,), np.where(keep, x.data, 0.0), lambda g: (g * keep,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch per sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor, clamp: float = 30.0) -> Tensor:
    """``log(sigmoid(x))`` with ``x`` clipped to ``[-clamp, clamp]`` first."""
    z = np.clip(x.data, -clamp, clamp)
    inside = np.abs(x.data) <= clamp
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    d = 1.0 - _sigmoid(z)
    return _record("log_sigmoid", (x,), out, lambda g: (g * d * inside,))


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat shape mismatch: {a.shape} | {b.shape}")
    k = a.shape[-1]
    return _record("concat", (a, b), np.concatenate([a.data, b.data], axis=-1),
                   lambda g: (g[..., :k], g[..., k:]))


def dropout_apply(x: Tensor, mask: np.ndarray | None, rate: float) -> Tensor:
    """Inverted dropout with a precomputed keep-mask (1 = keep)."""
    if mask is None or rate == 0.0:
        return x
    if mask.shape != x.shape:
        raise DimensionError(f"dropout mask {mask.shape} does not match input {x.shape}")
    factor = mask * (1.0 / (1.0 - rate))
    return _record("dropout", (x,), x.data * factor, lambda g: (g * factor,))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray | None:
    if rate == 0.0:
        return None
    return (rng.random(shape) >= rate).astype(np.float64)


# ---------------------------------------------------------------- structured ops


def causal_mask(T: int) -> np.ndarray:
    """Boolean T x T mask, True where attention is allowed (j <= i)."""
    return np.tril(np.ones((T, T), dtype=bool))


def masked_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the causal prefix; cells with j > i are exactly 0."""
    if scores.data.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"masked_softmax needs square trailing axes, got {scores.shape}")
    allowed = causal_mask(scores.shape[-1])
    s = np.where(allowed, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)  # exp(-inf) == 0 exactly
    A = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (A * (g - (g * A).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", (scores,), A, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    D = x.shape[-1] if x.data.ndim else 0
    if D == 0:
        raise DimensionError(f"layer_norm needs a non-empty feature axis, got {x.shape}")
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs features {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def backward(g):
        gx_hat = g * G
        gx = inv / D * (D * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, D)
        return gx, (flat_g * xhat.reshape(-1, D)).sum(axis=0), flat_g.sum(axis=0)

    return _record("layer_norm", (x, gain, bias), xhat * G + bias.data, backward)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"lookup index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        flat = index.reshape(-1)
        rows = g.reshape(-1, shape[-1])
        gt = np.empty(shape)
        for j in range(shape[-1]):  # per-column bincount beats np.add.at by a wide margin
            gt[:, j] = np.bincount(flat, weights=rows[:, j], minlength=shape[0])
        return (gt,)

    return _record("gather", (table,), table.data[index], backward)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product along the last axis.

    ``b`` may lack ``a``'s second-to-last axis, in which case each of its rows
    is dotted with every row of the matching ``a`` slice: shapes
    ``(..., k, d) . (..., d) -> (..., k)``.
    """
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _record("rowdot", (a, b), np.einsum("...d,...d->...", A, B),
                       lambda g: (g[..., None] * B, g[..., None] * A))
    if A.ndim == B.ndim + 1 and a.shape[:-2] + a.shape[-1:] == b.shape:
        return _record("rowdot", (a, b), np.einsum("...kd,...d->...k", A, B),
                       lambda g: (g[..., None] * B[..., None, :], np.einsum("...k,...kd->...d", g, A)))
    raise DimensionError(f"rowdot shape mismatch: {a.shape} . {b.shape}")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array(math.fsum(x.data.ravel())),
                   lambda g: (np.full(shape, float(g)),))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over cells where ``mask`` is set; 0 when nothing is set.

    The reduction is exactly rounded (``math.fsum``), so padding cells and the
    order of cells never change the result.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask {mask.shape} does not match {x.shape}")
    count = int(mask.sum())
    if count == 0:
        return _record("masked_mean", (x,), np.array(0.0), lambda g: (np.zeros(x.shape),))
    total = math.fsum(x.data[mask])
    w = mask / count
    return _record("masked_mean", (x,), np.array(total / count), lambda g: (float(g) * w,))
