"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a backward rule.  :class:`Tape` linearises that graph into a
topologically ordered op list so :func:`backward` can visit each op exactly once
in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
LOG_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Ops inside the block record nothing, so intermediates are freed as soon
    as they go out of scope (inference, finite-difference probes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")
    __array_priority__ = 100
    # make numpy defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = _readonly(np.array(data, dtype=dtype, copy=True))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _result(cls, op: str, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        if not np.all(np.isfinite(data)):
            shapes = ", ".join(str(p.shape) for p in parents)
            raise FloatingPointError(f"{op}: non-finite output from inputs of shape {shapes}")
        out = cls.__new__(cls)
        out.data = _readonly(np.asarray(data))
        out.grad = None
        out.name = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.op = op
            out.parents = parents
            out._backward = backward
        else:
            out.op = None
            out.parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return Tensor._result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return Tensor._result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return Tensor._result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"div: zero in divisor of shape {b.shape}")
    out = a.data / b.data
    return Tensor._result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {exc}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result("matmul", out, (a, b), bw)


# -- elementwise unary -------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; callers floor their argument (see ``LOG_EPS``) before calling."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive value in input of shape {a.shape}; add a floor first")
    return Tensor._result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError(f"sqrt: negative value in input of shape {a.shape}")
    out = np.sqrt(a.data)
    return Tensor._result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a, lo: float) -> Tensor:
    """``max(a, lo)`` elementwise; gradient passes where ``a > lo``."""
    a = as_tensor(a)
    above = a.data > lo
    return Tensor._result("clamp_min", np.where(above, a.data, lo), (a,), lambda g: (g * above,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor._result("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def lrelu(a, beta: float = 1e-2) -> Tensor:
    """Leaky ReLU: ``x`` where ``x >= 0``, ``beta * x`` elsewhere."""
    a = as_tensor(a)
    pos = a.data >= 0
    slope = np.where(pos, 1.0, beta).astype(a.dtype)
    return Tensor._result("lrelu", a.data * slope, (a,), lambda g: (g * slope,))


# -- reductions --------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._result("mean", out, (a,), bw)


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser only."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return Tensor._result("max", out, (a,), bw)


# -- structural --------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor._result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort(axes)
    return Tensor._result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._result("flip", np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._result("slice", out, (a,), bw)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis {axis} of shape {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    return getitem(a, index)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    axis = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return Tensor._result("concat", out, tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    axis = axis % out.ndim
    return Tensor._result(
        "stack", out, tuple(ts),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


# -- tape & backward ---------------------------------------------------
class Tape:
    """Recorded ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_loss(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p._backward is not None:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for node in self.ops:
            for p in node.parents:
                if p._backward is None and p.requires_grad:
                    found.setdefault(id(p), p)
        return list(found.values())


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) back through the tape.

    Returns a map from each requires-grad leaf to its gradient and also adds
    that gradient into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key, np.zeros_like(leaf.data))
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


def grad_of(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt``; zeros when disconnected."""
    wrt = list(wrt)
    got = backward(loss)
    return [got.get(t, np.zeros_like(t.data)) for t in wrt]
