"""Dense reverse-mode differentiation over numpy arrays.

Every trainable quantity in the model is a :class:`DiffValue` leaf; every
operation below records a closure that maps the upstream gradient to the
gradients of its operands. ``backward`` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


class DiffValue:
    __slots__ = ("values", "_grad", "_parents", "_backward", "requires_grad", "op", "name")

    def __init__(self, values, parents: Sequence["DiffValue"] = (), backward=None,
                 requires_grad: bool = False, op: str = "", name: str = ""):
        self.values = np.asarray(values, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents) if requires_grad else ()
        self._backward = backward if requires_grad else None
        self.op = op
        self.name = name

    # basic properties ------------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=DTYPE).reshape(self.values.shape).copy()

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"DiffValue{tag}(shape={self.shape}, op={self.op or 'leaf'})"

    # operator sugar ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self):
        backward(self)


def leaf(values, name: str = "") -> DiffValue:
    """A trainable leaf (gradient is tracked)."""
    return DiffValue(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


def constant(values) -> DiffValue:
    return DiffValue(values)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference rollouts)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(values, parents, backward, op) -> DiffValue:
    if not _GRAD_ENABLED:
        return DiffValue(values, op=op)
    for p in parents:
        if p.requires_grad:
            return DiffValue(values, parents, backward, requires_grad=True, op=op)
    return DiffValue(values, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary(fn, a, b, op):
    try:
        return fn(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    out = _binary(np.add, a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    out = _binary(np.subtract, a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> DiffValue:
    if not isinstance(b, DiffValue) and np.isscalar(b):
        return scale(as_value(a), float(b))
    if not isinstance(a, DiffValue) and np.isscalar(a):
        return scale(b, float(a))
    a, b = as_value(a), as_value(b)
    out = _binary(np.multiply, a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    out = _binary(np.divide, a, b, "div")

    def bw(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * out / b.values, b.shape))

    return _node(out, (a, b), bw, "div")


def scale(a: DiffValue, factor: float) -> DiffValue:
    def bw(g):
        return (g * factor,)

    return _node(a.values * factor, (a,), bw, "scale")


def _unary(a: DiffValue, out: np.ndarray, local: Callable[[], np.ndarray], op: str) -> DiffValue:
    def bw(g):
        return (g * local(),)

    return _node(out, (a,), bw, op)


def exp(a: DiffValue) -> DiffValue:
    out = np.exp(a.values)
    return _unary(a, out, lambda: out, "exp")


def log(a: DiffValue) -> DiffValue:
    return _unary(a, np.log(a.values), lambda: 1.0 / a.values, "log")


def square(a: DiffValue) -> DiffValue:
    return _unary(a, a.values * a.values, lambda: 2.0 * a.values, "square")


def sqrt(a: DiffValue) -> DiffValue:
    out = np.sqrt(a.values)
    return _unary(a, out, lambda: 0.5 / out, "sqrt")


def abs_(a: DiffValue) -> DiffValue:
    return _unary(a, np.abs(a.values), lambda: np.sign(a.values), "abs")


def relu(a: DiffValue) -> DiffValue:
    return _unary(a, np.maximum(a.values, 0.0), lambda: (a.values > 0).astype(DTYPE), "relu")


def tanh(a: DiffValue) -> DiffValue:
    out = np.tanh(a.values)
    return _unary(a, out, lambda: 1.0 - out * out, "tanh")


def sigmoid(a: DiffValue) -> DiffValue:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _unary(a, out, lambda: out * (1.0 - out), "sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: DiffValue) -> DiffValue:
    """tanh-approximated GELU; smooth everywhere, so gradient checks never hit a kink."""
    x = a.values
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def local():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner

    return _unary(a, out, local, "gelu")


def clamp(a: DiffValue, lo: float, hi: float) -> DiffValue:
    out = np.clip(a.values, lo, hi)
    return _unary(a, out, lambda: ((a.values >= lo) & (a.values <= hi)).astype(DTYPE), "clamp")


def maximum(a, b) -> DiffValue:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_value(a), as_value(b)
    pick_a = a.values >= b.values

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.values, b.values), (a, b), bw, "maximum")


def minimum(a, b) -> DiffValue:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_value(a), as_value(b)
    pick_a = a.values <= b.values

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.values, b.values), (a, b), bw, "minimum")


def where(cond, a, b) -> DiffValue:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_value(a), as_value(b)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.values, b.values), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum_(a: DiffValue, axis=None, keepdims: bool = False) -> DiffValue:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a: DiffValue, axis=None, keepdims: bool = False) -> DiffValue:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: DiffValue, shape) -> DiffValue:
    def bw(g):
        return (g.reshape(a.shape),)

    return _node(a.values.reshape(shape), (a,), bw, "reshape")


def transpose(a: DiffValue, axes=None) -> DiffValue:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.values, axes), (a,), bw, "transpose")


def take(a: DiffValue, index) -> DiffValue:
    """Basic or integer-array indexing (``slice`` in the op suite)."""
    out = a.values[index]

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        full = np.zeros_like(a.values)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (a,), bw, "take")


slice_ = take


def concat(parts: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    parts = [as_value(p) for p in parts]
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, parts, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra and composite layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.values @ b.values, (a, b), bw, "matmul")


def softmax(a: DiffValue, axis: int = -1) -> DiffValue:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def layer_norm(x: DiffValue, gain: DiffValue, bias: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + bias.values
    n = v.shape[-1]

    def bw(g):
        gxhat = g * gain.values
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: DiffValue):
    order, seen = [], set()
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


def backward(root: DiffValue):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.values.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.values)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def gradient_errors(f: Callable[[], DiffValue], params: dict[str, DiffValue], eps: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients, per parameter.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    With ``max_entries`` set, each parameter is checked on a seeded random
    subset of that many entries.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    for p in params.values():
        p.zero_grad()
    backward(f())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f().item()
            flat[i] = old - eps
            fm = f().item()
            flat[i] = old
            numeric = (fp - fm) / (2 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        errors[name] = worst
    return errors


def finite_diff_check(f: Callable[[], DiffValue], params: Iterable[DiffValue] | dict[str, DiffValue],
                      eps: float = 1e-5, max_entries: int | None = None) -> float:
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    errs = gradient_errors(f, params, eps=eps, max_entries=max_entries)
    return max(errs.values()) if errs else 0.0
