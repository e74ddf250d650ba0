"""Dense float64 tensors with an explicit, single-use reverse-mode tape.

Every op validates its output for NaN/Inf while checks are enabled (the
default); production callers may switch checks off for speed. All math is
64-bit end to end.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_SQRT_2_OVER_PI = 0.7978845608028654


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf while checks are enabled."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes; message names both shapes."""


class TapeError(RuntimeError):
    """Raised on tape misuse (no tape, consumed tape, nested tapes)."""


_tls = threading.local()
_validate = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf output validation; returns the previous setting."""
    global _validate
    previous = _validate
    _validate = bool(enabled)
    return previous


def _check(arr: np.ndarray, op: str) -> None:
    if _validate and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


class Tape:
    """Records one forward pass; consumed by a single backward call.

    Tapes are confined to the thread that opened them and may not nest.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if getattr(_tls, "tape", None) is not None:
            raise TapeError("tapes do not nest; close the active tape first")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = None


def _active_tape() -> Tape | None:
    return getattr(_tls, "tape", None)


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: "Tensor", inputs: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> None:
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A float64 array plus grad metadata; data is owned and not resized."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        _check(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):  # noqa: D105
        return add(self, other)

    def __radd__(self, other):  # noqa: D105
        return add(self, other)

    def __mul__(self, other):  # noqa: D105
        return mul(self, other)

    def __rmul__(self, other):  # noqa: D105
        return mul(self, other)

    def __sub__(self, other):  # noqa: D105
        return add(self, mul(other, -1.0))

    def __neg__(self):  # noqa: D105
        return mul(self, -1.0)

    def __matmul__(self, other):  # noqa: D105
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...],
            vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        node = _Node(out, inputs, vjp)
        out.node = node
        out.tape = tape
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes that were broadcast."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    _check(out.data, "add")

    def vjp(g: np.ndarray):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    _check(out.data, "mul")

    def vjp(g: np.ndarray):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """a [..., n, k] @ b [..., k, m] -> [..., n, m]; leading dims must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes do not align: {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    _check(out.data, "matmul")

    def vjp(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(tuple(shape)))

    def vjp(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _record(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g: np.ndarray):
        return (g.transpose(inverse),)

    return _record(out, (x,), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """First-axis slice x[start:stop] with scatter-back gradient."""
    x = _as_tensor(x)
    out = Tensor(x.data[start:stop])

    def vjp(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray):
        index = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _record(out, tuple(parts), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; gradient accumulates over repeated ids."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table {table.shape}")
    out = Tensor(table.data[ids])

    def vjp(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = _as_tensor(x)
    inner = _SQRT_2_OVER_PI * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t))
    _check(out.data, "gelu")

    def vjp(g: np.ndarray):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x.data ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * dinner
        return (g * dx,)

    return _record(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    _check(out.data, "softmax")

    def vjp(g: np.ndarray):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm scale/shift must be ({d},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _check(out.data, "layer_norm")

    def vjp(g: np.ndarray):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gamma, beta), vjp)


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    _check(out.data, "sum")

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean())
    _check(out.data, "mean")

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g / x.size, x.shape).copy(),)

    return _record(out, (x,), vjp)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked-in rows.

    logits [T, V]; targets [T] int; mask [T] bool. Masked-out rows contribute
    nothing to the value or the gradient.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_masked expects [T, V] logits, got {logits.shape}")
    t, v = logits.shape
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError(
            f"targets {targets.shape} and mask {mask.shape} must both be ({t},)")
    n_in = int(mask.sum())
    if n_in == 0:
        raise ValueError("cross_entropy_masked: every position is masked out")
    active = targets[mask]
    if active.min() < 0 or active.max() >= v:
        raise ShapeError(f"target id out of range for vocab size {v}")

    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    log_probs = logits.data - lse
    picked = log_probs[np.arange(t), targets]
    out = Tensor(-(picked[mask].sum()) / n_in)
    _check(out.data, "cross_entropy_masked")

    def vjp(g: np.ndarray):
        p = np.exp(log_probs)
        p[np.arange(t), targets] -= 1.0
        p *= (mask.astype(np.float64) / n_in)[:, None]
        return (p * g,)

    return _record(out, (logits,), vjp)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar ``loss``; consumes and frees its tape.

    Populates ``grad`` on every requires-grad tensor recorded on the tape;
    tensors not reachable from ``loss`` get zeros. Afterwards the graph is
    dismantled, so a tape supports exactly one backward call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        raise TapeError("loss was not recorded on a tape")
    tape = loss.tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True

    # Topological order via iterative post-order walk from the loss node.
    order: list[_Node] = []
    seen: set[int] = set()
    stack: list[tuple[_Node, bool]] = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))

    for node in tape.nodes:
        for t in (node.output,) + node.inputs:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        grads = node.vjp(node.output.grad)
        for t, g in zip(node.inputs, grads):
            if t.requires_grad and g is not None:
                t.grad += g.reshape(t.shape)
        _release(node)

    # Tensors, nodes, and vjp closures on a tape form reference cycles, and
    # the closures pin every forward intermediate. Dismantle the graph so
    # plain refcounting frees step memory instead of waiting on gc.
    for node in tape.nodes:
        _release(node)
    tape.nodes.clear()


def _release(node: _Node) -> None:
    node.output.node = None
    node.output.tape = None
    node.inputs = ()
    node.vjp = None


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor,
                            eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar closure ``f`` at ``point`` against
    central finite differences; returns the max relative error.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        y = f(x)
    if y.data.size != 1:
        raise ShapeError(f"closure must return a scalar, got shape {y.shape}")
    backward(y)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f(Tensor(x.data.copy())).item()
        flat[i] = saved - eps
        lo = f(Tensor(x.data.copy())).item()
        flat[i] = saved
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
