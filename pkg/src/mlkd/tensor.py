"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays. Every op that touches a tensor with
``requires_grad`` records its parents and a local backward closure, so calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

Axis = int | Sequence[int] | None

_STRICT = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an op produces NaN or inf."""


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` from any op whose output is non-finite."""
    global _STRICT
    prev = _STRICT
    _STRICT = enabled
    try:
        yield
    finally:
        _STRICT = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading axes added by broadcasting, then singleton axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _as_tensor(x: Tensor | float | np.ndarray) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make numpy hand mixed expressions like ``ndarray - Tensor`` to the reflected Tensor op
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self.op = ""

    @classmethod
    def _result(
        cls,
        op: str,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ) -> Tensor:
        if _STRICT and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ----------------------------------------------------------------- basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --------------------------------------------------------------- backward

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every participating leaf."""
        if self.data.size != 1 or self.data.ndim != 0:
            raise ShapeError(f"backward: root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward: root is detached from the differentiation graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other) -> Tensor:
        b = _as_tensor(other)
        _broadcast_shape("add", self.shape, b.shape)
        sa, sb = self.shape, b.shape
        return Tensor._result(
            "add", self.data + b.data, (self, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        b = _as_tensor(other)
        _broadcast_shape("subtract", self.shape, b.shape)
        sa, sb = self.shape, b.shape
        return Tensor._result(
            "subtract", self.data - b.data, (self, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        b = _as_tensor(other)
        _broadcast_shape("multiply", self.shape, b.shape)
        a_data, b_data = self.data, b.data
        return Tensor._result(
            "multiply", a_data * b_data, (self, b),
            lambda g: (_unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        b = _as_tensor(other)
        _broadcast_shape("divide", self.shape, b.shape)
        a_data, b_data = self.data, b.data
        out = a_data / b_data
        return Tensor._result(
            "divide", out, (self, b),
            lambda g: (
                _unbroadcast(g / b_data, a_data.shape),
                _unbroadcast(-g * out / b_data, b_data.shape),
            ),
        )

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._result("negate", -self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result("index", np.array(self.data[index]), (self,), back)

    # ---------------------------------------------------------- unary maths

    def square(self) -> Tensor:
        x = self.data
        return Tensor._result("square", x * x, (self,), lambda g: (2.0 * x * g,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return Tensor._result("sqrt", out, (self,), lambda g: (0.5 * g / out,))

    def log(self) -> Tensor:
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._result("log", out, (self,), lambda g: (g / x,))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._result("exp", out, (self,), lambda g: (g * out,))

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor._result("relu", np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def sigmoid(self) -> Tensor:
        out = _stable_sigmoid(self.data)
        return Tensor._result("sigmoid", out, (self,), lambda g: (g * out * (1.0 - out),))

    def clip(self, lo: float | None = None, hi: float | None = None) -> Tensor:
        """Clamp values; the gradient is zero wherever clamping was active."""
        x = self.data
        out = np.clip(x, lo, hi)
        mask = np.ones(x.shape, dtype=bool)
        if lo is not None:
            mask &= x >= lo
        if hi is not None:
            mask &= x <= hi
        return Tensor._result("clip", out, (self,), lambda g: (g * mask,))

    # ------------------------------------------------------------ reductions

    def sum(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result("sum", self.data.sum(axis=axes, keepdims=keepdims), (self,), back)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        count = 1
        for a in axes:
            count *= self.shape[a]
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    # -------------------------------------------------------------- movement

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
        return Tensor._result("reshape", out, (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result("transpose", self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.transpose()


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result("matmul", ad @ bd, (a, b), back)


# functional aliases used by the model and loss code
def add(a, b) -> Tensor:
    return _as_tensor(a) + b


def subtract(a, b) -> Tensor:
    return _as_tensor(a) - b


def multiply(a, b) -> Tensor:
    return _as_tensor(a) * b


def divide(a, b) -> Tensor:
    return _as_tensor(a) / b


def square(a) -> Tensor:
    return _as_tensor(a).square()


def log(a) -> Tensor:
    return _as_tensor(a).log()


def relu(a) -> Tensor:
    return _as_tensor(a).relu()


def sigmoid(a) -> Tensor:
    return _as_tensor(a).sigmoid()


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Per coordinate the error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("finite_difference_check: f(x) is not finite")
    if out.data.ndim != 0:
        raise ShapeError(f"finite_difference_check: f must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    probe_flat = probe.reshape(-1)
    for i in range(probe_flat.size):
        orig = probe_flat[i]
        probe_flat[i] = orig + eps
        hi = f(Tensor(probe)).item()
        probe_flat[i] = orig - eps
        lo = f(Tensor(probe)).item()
        probe_flat[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
