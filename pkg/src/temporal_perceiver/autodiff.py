"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every forward op builds its output tensor together with a closure mapping the
output gradient to input gradients. :func:`backward` walks the recorded graph
in reverse topological order. The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
LN_EPS = 1e-9

_grad_enabled = True
_node_ids = itertools.count(1)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, *, _parents=(), _backward=None, op=None):
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op or 'leaf'}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.node_id = next(_node_ids) if _parents else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() on tensor of shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(values, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_or_raise(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_or_raise("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_or_raise("multiply", a, b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), backward, "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, backward, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    a = _as_tensor(a)
    try:
        out = a.values[key]
    except IndexError as exc:
        raise ShapeError("slice", f"{key!r} on shape {a.shape}: {exc}") from None

    def backward(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", f"need >= 2 dims, got {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool, True = keep)
    gives excluded positions exactly zero probability."""
    a = _as_tensor(a)
    x = a.values
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward, "row-softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    x = _as_tensor(x)
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError("layer-norm", f"affine shape {p.shape} does not match width {c}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.values
    if beta is not None:
        out = out + beta.values
    parents = tuple(p for p in (x, gamma, beta) if p is not None)

    def backward(g):
        gxhat = g * gamma.values if gamma is not None else g
        gx = inv * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, backward, "layer-norm")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    on = a.values > 0
    return _make(np.where(on, a.values, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(a: Tensor, floor: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped to ``floor``; clamped entries get zero gradient."""
    a = _as_tensor(a)
    x = a.values
    kept = x >= floor
    safe = np.where(kept, x, floor)
    return _make(np.log(safe), (a,), lambda g: (np.where(kept, g / safe, 0.0),), "log")


def abs_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * sign,), "abs")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_(a: Tensor, axis: int) -> Tensor:
    """Max reduction along one axis; gradient routed to the first maximiser."""
    a = _as_tensor(a)
    arg = a.values.argmax(axis=axis)
    out = np.take_along_axis(a.values, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), backward, "max")


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; repeated indices accumulate gradient."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding-lookup", f"index out of range for {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.values[idx], (table,), backward, "embedding-lookup")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Per-batch row gather: ``out[b, i] = x[b, idx[b, i]]`` for ``x`` of shape (B, N, ...)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("embedding-lookup", f"index shape {idx.shape} does not fit {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(x.values[rows, idx], (x,), backward, "embedding-lookup")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "scale": scale,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "transpose": transpose,
    "reshape": reshape,
    "row-softmax": softmax,
    "layer-norm": layer_norm,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "abs": abs_,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "embedding-lookup": embedding,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch an op by tag, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``root``.

    Leaf gradients accumulate across calls; call ``zero_grad`` (or let the
    optimizer do it) between steps.
    """
    if root.values.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise BackwardError("root is not on the tape (no recorded op reaches a parameter)")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max over parameter entries of |analytic - central| / max(1, |analytic|, |central|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.zero_grad()
    root = fn()
    if root.requires_grad:
        backward(root)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = fn().item()
                flat[i] = orig - step
                lo = fn().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteError(f"non-finite loss while probing parameter entry {i}")
                numeric = (hi - lo) / (2.0 * step)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# parameters, init, optimizer
# ---------------------------------------------------------------------------


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)))


def normal_init(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=tuple(shape)))


@dataclass
class OptimizerState:
    """AdamW state: decoupled weight decay, bias-corrected moments."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise BackwardError(f"parameters {missing[:5]} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.values *= 1.0 - state.lr * state.weight_decay
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
