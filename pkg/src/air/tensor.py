"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
vector-Jacobian closure. :func:`backward` walks the recorded graph from a
scalar loss and returns a :class:`GradientMap` keyed by the leaf tensors.

Graphs are rebuilt every step and never reused. Recording state is
thread-local, so independent tapes may be built on separate threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GradientMap",
    "apply_op",
    "backward",
    "finite_difference_check",
    "no_grad",
    "as_tensor",
    "OPS",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate operations without recording graph edges."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that may participate in a computation graph."""

    __slots__ = ("data", "requires_grad", "kind", "name", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.kind = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node_id(self) -> int:
        return id(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, kind={self.kind}{label})"

    def __float__(self) -> float:
        return self.item()

    # operator sugar ---------------------------------------------------------
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __add__(self, other):
        return apply_op("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_op("sub", [self, other])

    def __rsub__(self, other):
        return apply_op("sub", [other, self])

    def __mul__(self, other):
        return apply_op("mul", [self, other])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_op("div", [self, other])

    def __rtruediv__(self, other):
        return apply_op("div", [other, self])

    def __neg__(self):
        return apply_op("neg", [self])

    def __matmul__(self, other):
        return apply_op("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_op("matmul", [other, self])

    def __getitem__(self, index):
        return apply_op("take", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return apply_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_op("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", [self], shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientMap(dict):
    """Mapping from parameter tensors to gradient arrays of identical shape."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")

    def by_name(self) -> dict[str, np.ndarray]:
        return {p.name or str(p.node_id): g for p, g in self.items()}


# --------------------------------------------------------------------------
# operation table: each entry maps (arrays, attrs) -> (output, vjp)
# vjp maps the output cotangent to a tuple of input cotangents.


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _add(xs, attrs):
    a, b = xs
    _broadcast_check("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(xs, attrs):
    a, b = xs
    _broadcast_check("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(xs, attrs):
    a, b = xs
    _broadcast_check("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(xs, attrs):
    a, b = xs
    _broadcast_check("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _neg(xs, attrs):
    return -xs[0], lambda g: (-g,)


def _exp(xs, attrs):
    out = np.exp(xs[0])
    return out, lambda g: (g * out,)


def _log(xs, attrs):
    a = xs[0]
    return np.log(a), lambda g: (g / a,)


def _square(xs, attrs):
    a = xs[0]
    return a * a, lambda g: (2.0 * a * g,)


def _sqrt(xs, attrs):
    out = np.sqrt(xs[0])
    return out, lambda g: (0.5 * g / out,)


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum(xs, attrs):
    a = xs[0]
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    return a.sum(axis=axis, keepdims=keepdims), lambda g: (_expand(g, a.shape, axis, keepdims),)


def _mean(xs, attrs):
    a = xs[0]
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)
    return out, lambda g: (_expand(g, a.shape, axis, keepdims) / count,)


def _logsumexp(xs, attrs):
    a = xs[0]
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    peak = np.max(a, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    shifted = np.exp(a - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out_k = peak + np.log(total)
    if keepdims:
        out = out_k
    elif axis is None:
        out = out_k.reshape(())
    else:
        out = np.squeeze(out_k, axis=axis)
    soft = shifted / total
    return out, lambda g: (_expand(g, a.shape, axis, keepdims) * soft,)


def _elu(xs, attrs):
    a = xs[0]
    neg = np.expm1(np.minimum(a, 0.0))
    out = np.where(a > 0, a, neg)
    return out, lambda g: (g * np.where(a > 0, 1.0, neg + 1.0),)


def _softplus(xs, attrs):
    a = xs[0]
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return out, lambda g: (g * expit(a),)


def _sigmoid(xs, attrs):
    out = expit(xs[0])
    return out, lambda g: (g * out * (1.0 - out),)


def _matmul(xs, attrs):
    a, b = xs
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = g @ b.T
        if a.ndim == 1:
            gb = np.outer(a, g)
        else:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return a @ b, vjp


def _column_l2_norm(xs, attrs):
    v = xs[0]
    if v.ndim != 2:
        raise ValueError(f"column_l2_norm: expected a matrix, got shape {v.shape}")
    norm = np.sqrt((v * v).sum(axis=0))
    return norm, lambda g: (v * (g / norm),)


def _minimum(xs, attrs):
    a, b = xs
    _broadcast_check("min_with_scalar_broadcast", a, b)
    # exact ties route to the second argument
    first = a < b
    out = np.where(first, a, b)
    return out, lambda g: (
        _unbroadcast(np.where(first, g, 0.0), a.shape),
        _unbroadcast(np.where(first, 0.0, g), b.shape),
    )


def _concat(xs, attrs):
    axis = attrs.get("axis", 0)
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _take(xs, attrs):
    a = xs[0]
    index = attrs["index"]
    out = a[index]

    def vjp(g):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return np.array(out, copy=True), vjp


def _reshape(xs, attrs):
    a = xs[0]
    try:
        out = a.reshape(attrs["shape"])
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {attrs['shape']}") from None
    return out, lambda g: (g.reshape(a.shape),)


OPS: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "neg": _neg,
    "exp": _exp,
    "log": _log,
    "square": _square,
    "sqrt": _sqrt,
    "sum": _sum,
    "mean": _mean,
    "logsumexp": _logsumexp,
    "elu": _elu,
    "softplus": _softplus,
    "sigmoid": _sigmoid,
    "column_l2_norm": _column_l2_norm,
    "min_with_scalar_broadcast": _minimum,
    "concat": _concat,
    "take": _take,
    "reshape": _reshape,
}


def apply_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate operation ``kind`` on ``inputs`` and record the graph edge.

    Raises ``ValueError`` on incompatible shapes and ``FloatingPointError``
    when finite inputs produce a non-finite result.
    """
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    with np.errstate(all="ignore"):
        out, vjp = fn(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(a)) for a in arrays):
        raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.name = None
    result.kind = kind
    track = _grad_enabled() and any(t.requires_grad for t in tensors)
    result.requires_grad = track
    if track:
        result._parents = tuple(tensors)
        result._vjp = vjp
    else:
        result._parents = ()
        result._vjp = None
    return result


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every leaf that requires grad and was reached. Any
    tensor in ``params`` that the loss does not depend on gets a zero entry.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result = GradientMap()
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                result[node] = np.array(g, dtype=np.float64).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def finite_difference_check(
    fn: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    eps: float = 1e-6,
) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``fn`` must be deterministic in ``params``. The error per coordinate is
    ``|fd - ad| / max(1, |ad|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.requires_grad = True
    loss = fn(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("finite_difference_check: non-finite function value")
    grads = backward(loss, params)

    def value() -> float:
        with no_grad():
            out = fn(params).item()
        if not np.isfinite(out):
            raise FloatingPointError("finite_difference_check: non-finite function value")
        return out

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        auto = grads[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(numeric - auto[i]) / max(1.0, abs(auto[i])))
    return worst


# functional helpers --------------------------------------------------------


def exp(x):
    return apply_op("exp", [x])


def log(x):
    return apply_op("log", [x])


def square(x):
    return apply_op("square", [x])


def sqrt(x):
    return apply_op("sqrt", [x])


def elu(x):
    return apply_op("elu", [x])


def softplus(x):
    return apply_op("softplus", [x])


def sigmoid(x):
    return apply_op("sigmoid", [x])


def logsumexp(x, axis=None, keepdims=False):
    return apply_op("logsumexp", [x], axis=axis, keepdims=keepdims)


def minimum(a, b):
    return apply_op("min_with_scalar_broadcast", [a, b])


def column_l2_norm(v):
    return apply_op("column_l2_norm", [v])


def concat(xs, axis=0):
    return apply_op("concat", list(xs), axis=axis)
