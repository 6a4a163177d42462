"""Dense float32 tensors with a define-by-run reverse-mode gradient tape.

Storage is a contiguous row-major numpy float32 array. Every differentiable
operation optionally records a backward rule onto the active ``Tape``; calling
``Tape.backward(loss)`` replays the rules in reverse recording order, which is
a valid topological order for a define-by-run graph. Tensors with
``requires_grad=False`` never accumulate gradients, even when gradients flow
through operations that read them.

All matrix products go through :func:`mm`, which doubles as the hook for the
FLOP instrumentation used by the benchmark harness.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, StateError

_TAPE: "Tape | None" = None
_FLOPS: "FlopCounter | None" = None
_FLOP_SCOPE: list[str] = []


class Tensor:
    """A dense float32 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; python scalars are treated as constants.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return add(self, neg(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


class Tape:
    """Recorded forward operations; rebuilt for every training step."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._entered = False

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise StateError("a gradient tape is already recording")
        _TAPE = self
        self._entered = True
        return self

    def __exit__(self, *exc) -> None:
        global _TAPE
        _TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay backward rules in reverse order."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._nodes):
            if out.grad is not None:
                rule(out.grad)


def active_tape() -> "Tape | None":
    return _TAPE


def _record(out: Tensor, parents: tuple[Tensor, ...], rule) -> Tensor:
    tape = _TAPE
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    tape._nodes.append((out, rule))
    return out


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


class FlopCounter:
    """Counts 2*m*k*n per matrix product, keyed by the active scope label.

    Only matrix products are counted (the dominant cost and the one the
    analytic accounting models); elementwise ops, norms and softmax are
    excluded on both sides of the books.
    """

    def __init__(self):
        self.by_scope: dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        global _FLOPS
        if _FLOPS is not None:
            raise StateError("a FLOP counter is already active")
        _FLOPS = self
        return self

    def __exit__(self, *exc) -> None:
        global _FLOPS
        _FLOPS = None

    def add(self, scope: str, flops: int) -> None:
        self.by_scope[scope] = self.by_scope.get(scope, 0) + flops

    def total(self) -> int:
        return sum(self.by_scope.values())


@contextmanager
def flop_scope(label: str):
    _FLOP_SCOPE.append(label)
    try:
        yield
    finally:
        _FLOP_SCOPE.pop()


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw matrix product with shape checking and FLOP accounting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    if _FLOPS is not None:
        batch = 1
        for d in out.shape[:-2]:
            batch *= d
        scope = _FLOP_SCOPE[-1] if _FLOP_SCOPE else "unscoped"
        _FLOPS.add(scope, 2 * batch * out.shape[-2] * a.shape[-1] * out.shape[-1])
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(mm(a.data, b.data))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _record(out, (a,), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = Tensor(a.data * c32)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c32)

    return _record(out, (a,), rule)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + np.float32(c))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)

    return _record(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, np.float32(0)))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _record(out, (a,), rule)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches stay fully precise.
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(np.float32)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(s)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return _record(out, (a,), rule)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(a.data * s)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * (s + a.data * s * (1.0 - s)))

    return _record(out, (a,), rule)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a.accumulate_grad(g * da)

    return _record(out, (a,), rule)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)
    out = Tensor(y)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))

    return _record(out, (a,), rule)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.shape[axis]

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape) / np.float32(count))

    return _record(out, (a,), rule)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), rule)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _record(out, (a,), rule)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    out = Tensor(table.data[ids])

    def rule(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _record(out, (table,), rule)


def rmsnorm(a: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    ms = (x * x).mean(axis=-1, keepdims=True)
    r = np.sqrt(ms + np.float32(eps))
    xn = x / r
    out = Tensor(xn * weight.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            gw = g * weight.data
            proj = (gw * x).sum(axis=-1, keepdims=True) / np.float32(d)
            a.accumulate_grad(gw / r - x * proj / (r * r * r))
        if weight.requires_grad:
            weight.accumulate_grad((g * xn).reshape(-1, d).sum(axis=0))

    return _record(out, (a, weight), rule)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean next-token cross entropy over positions whose target is not padding."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, vocab] logits, got {x.shape}")
    targets = np.asarray(targets).reshape(-1)
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy: every target position is padding")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= x.shape[1]:
        raise IndexError(
            f"target id out of vocabulary [0, {x.shape[1]}): "
            f"min={int(tv.min())} max={int(tv.max())}"
        )
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(x.shape[0]), np.where(valid, targets, 0)]
    per_pos = np.where(valid, lse - picked, np.float32(0))
    out = Tensor(per_pos.sum() / np.float32(n_valid))

    def rule(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = _softmax_np(x, axis=1)
            p[np.arange(x.shape[0]), np.where(valid, targets, 0)] -= np.where(valid, 1.0, 0.0)
            p[~valid] = 0.0
            logits.accumulate_grad(p * (g.reshape(()) / np.float32(n_valid)))

    return _record(out, (logits,), rule)


def ste_threshold(scores: Tensor, tau: float) -> Tensor:
    """Binarize at `tau` (ties kept); backward passes gradients straight through."""
    out = Tensor((scores.data >= np.float32(tau)).astype(np.float32))

    def rule(g: np.ndarray) -> None:
        if scores.requires_grad:
            scores.accumulate_grad(g)

    return _record(out, (scores,), rule)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _record(out, (a,), rule)


def put_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter `rows` into a zero tensor of `n_rows` rows (indices unique)."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n_rows,) + rows.shape[1:], dtype=np.float32)
    data[idx] = rows.data
    out = Tensor(data)

    def rule(g: np.ndarray) -> None:
        if rows.requires_grad:
            rows.accumulate_grad(g[idx])

    return _record(out, (rows,), rule)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a[rows[i], cols[i]] into a flat vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor(a.data[rows, cols])

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, cols), g)

    return _record(out, (a,), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.accumulate_grad(full)

    return _record(out, (a,), rule)


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position map on the last axis, split as [first half | second half].

    `cos`/`sin` must broadcast against the two halves (e.g. shape [L, hd/2]
    against [..., L, hd/2]). The rotation is orthogonal, so backward applies
    the inverse rotation to the incoming gradient.
    """
    x = a.data
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = Tensor(np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            g1, g2 = g[..., :half], g[..., half:]
            a.accumulate_grad(
                np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)
            )

    return _record(out, (a,), rule)
