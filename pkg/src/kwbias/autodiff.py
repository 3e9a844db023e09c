"""Dense float64 tensors with tape-based reverse-mode differentiation.

The kernel is deliberately small: row-major numpy storage and just the
primitives an encoder-decoder transformer with a keyword scoring head
needs.  Broadcasting is restricted to suffix alignment (bias vectors,
shared attention masks); everything else must match shapes exactly so
errors surface early.

Ops executed while a `Tape` is active record an adjoint closure when any
input requires gradients.  Running the recorded entries in reverse order
visits every node after all of its consumers, so each adjoint fires
exactly once.  With no active tape, ops are plain numpy calls, which is
the fast path used for inference.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import KwbiasError


class AutodiffError(KwbiasError):
    """Misuse of the tape machinery (non-scalar backward, stale tape, ...)."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible for the requested primitive."""


_STATE = threading.local()


def _active() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if _active() is not None:
            raise AutodiffError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc: object) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Tensors are immutable by convention once created; only `grad`
    accumulation and explicit optimizer updates write to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: object, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


def _track(data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        out._tape = tape
        return out
    return Tensor(data)


def _record(out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
    if out._tape is not None:
        out._tape._nodes.append((out, adjoint))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: adjoints may hand the same array to several inputs
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate `grad` for every tracked tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise AutodiffError(f"backward requires a scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise AutodiffError("tensor was not recorded on a tape")
    if tape.consumed:
        raise AutodiffError("stale tape: backward was already run on it")
    tape.consumed = True
    loss.grad = np.ones((), dtype=np.float64)
    for out, adjoint in reversed(tape._nodes):
        if out.grad is not None:
            adjoint(out.grad)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dimensions."""
    ad, bd = a.data, b.data
    if (
        ad.ndim < 2
        or bd.ndim != ad.ndim
        or ad.shape[:-2] != bd.shape[:-2]
        or ad.shape[-1] != bd.shape[-2]
    ):
        raise ShapeError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    out = _track(ad @ bd, (a, b))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(ad, -1, -2) @ g)

    _record(out, adjoint)
    return out


def _suffix_check(op: str, a: np.ndarray, b: np.ndarray) -> int:
    """Validate b as an exact suffix of a's shape; return leading-axis count."""
    if a.shape == b.shape:
        return 0
    k = a.ndim - b.ndim
    if k <= 0 or a.shape[k:] != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape} (suffix broadcast only)")
    return k


def add(a: Tensor, b: Tensor) -> Tensor:
    k = _suffix_check("add", a.data, b.data)
    out = _track(a.data + b.data, (a, b))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=tuple(range(k))) if k else g)

    _record(out, adjoint)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    k = _suffix_check("sub", a.data, b.data)
    out = _track(a.data - b.data, (a, b))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -(g.sum(axis=tuple(range(k))) if k else g))

    _record(out, adjoint)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = _track(ad * bd, (a, b))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * bd)
        if b.requires_grad:
            _accum(b, g * ad)

    _record(out, adjoint)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _track(a.data * c, (a,))

    def adjoint(g: np.ndarray) -> None:
        _accum(a, g * c)

    _record(out, adjoint)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.data.shape
    out = _track(a.data.reshape(shape), (a,))

    def adjoint(g: np.ndarray) -> None:
        _accum(a, g.reshape(orig))

    _record(out, adjoint)
    return out


def swap_axes(a: Tensor, i: int, j: int) -> Tensor:
    out = _track(np.swapaxes(a.data, i, j), (a,))

    def adjoint(g: np.ndarray) -> None:
        _accum(a, np.swapaxes(g, i, j))

    _record(out, adjoint)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis of size {n}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    index = tuple(sl)
    out = _track(a.data[index].copy(), (a,))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[index] = g
            _accum(a, ga)

    _record(out, adjoint)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = _track(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    sizes = [t.data.shape[axis] for t in tensors]

    def adjoint(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                _accum(t, g[tuple(sl)])
            offset += size

    _record(out, adjoint)
    return out


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.data.shape[0]} rows")
    out = _track(table.data[idx], (table,))

    def adjoint(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    _record(out, adjoint)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x2)))
    out = _track(0.5 * x * (1.0 + t), (a,))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x2)
            _accum(a, g * d)

    _record(out, adjoint)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _track(y, (a,))

    def adjoint(g: np.ndarray) -> None:
        _accum(a, g * y * (1.0 - y))

    _record(out, adjoint)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _track(y, (a,))

    def adjoint(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    _record(out, adjoint)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    yhat = (x.data - mu) * inv
    out = _track(yhat * gain.data + bias.data, (x, gain, bias))
    lead = tuple(range(x.data.ndim - 1))

    def adjoint(g: np.ndarray) -> None:
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if gain.requires_grad:
            _accum(gain, (g * yhat).sum(axis=lead))
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (
                gy - gy.mean(axis=-1, keepdims=True) - yhat * (gy * yhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx)

    _record(out, adjoint)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _track(np.asarray(a.data.sum()), (a,))

    def adjoint(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g, a.data.shape).astype(np.float64))

    _record(out, adjoint)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Mean negative log-softmax probability over unmasked positions.

    `logits` is (n, V); masked positions contribute nothing to the mean.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {ld.shape}")
    n, v = ld.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise ShapeError(f"targets shape {tgt.shape} does not match logits rows {n}")
    msk = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if msk.shape != (n,):
        raise ShapeError(f"mask shape {msk.shape} does not match logits rows {n}")
    if not msk.any():
        raise AutodiffError("empty loss: all positions are masked")
    live = tgt[msk]
    if live.size and (live.min() < 0 or live.max() >= v):
        raise ShapeError(f"target id out of range for {v} classes")

    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    count = int(msk.sum())
    nll = -logp[np.arange(n), tgt]
    out = _track(np.asarray((nll * msk).sum() / count), (logits,))

    def adjoint(g: np.ndarray) -> None:
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(n), tgt] -= 1.0
            grad *= (msk / count)[:, None]
            _accum(logits, g * grad)

    _record(out, adjoint)
    return out


def bce_with_logits(logits: Tensor, labels: Sequence[float]) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0,1} labels."""
    x = logits.data
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != x.shape:
        raise ShapeError(f"labels shape {y.shape} does not match logits {x.shape}")
    if x.size == 0:
        raise AutodiffError("empty loss: no labels")
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = _track(np.asarray(loss.sum() / n), (logits,))

    def adjoint(g: np.ndarray) -> None:
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            _accum(logits, g * (sig - y) / n)

    _record(out, adjoint)
    return out
