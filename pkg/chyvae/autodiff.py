"""
Minimal reverse-mode automatic differentiation over float64 NumPy arrays.

Operations performed inside ``with Tape() as tape:`` on tensors that require
gradients are recorded in execution order; :func:`backward` replays them in
exact reverse order, accumulating adjoints into ``Tensor.grad``.

There is no broadcasting: operands of element-wise primitives must have
identical shapes, and bias rows are tiled explicitly with :func:`repeat_rows`.
"""
from contextvars import ContextVar
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.special
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, DomainError, NotScalar

Array = NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

_current_tape: ContextVar[Optional["Tape"]] = ContextVar("chyvae_tape", default=None)


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values: Array = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(()))

    def grad_or_zeros(self) -> Array:
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor) and other.shape == self.shape:
            return elementwise_mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of primitive operations.

    A tape is single-owner. Entering it as a context manager makes it the
    recording target for the current thread or task.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append(_Node(output, inputs, backward))

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring leaf tensors consumed by recorded operations, first use first."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.is_leaf and tensor.requires_grad and id(tensor) not in seen:
                    seen[id(tensor)] = tensor
        return list(seen.values())

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.output.grad = None
            for tensor in node.inputs:
                tensor.grad = None

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Array]:
    """
    Accumulate d(loss)/d(tensor) into ``.grad`` for every tensor on the tape.

    Returns:
        The gradients of the gradient-requiring leaves, keyed by tensor.

    Raises:
        NotScalar: if ``loss`` has more than one element.
    """
    if loss.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        upstream = node.output.grad
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + grad
    return {leaf: leaf.grad_or_zeros() for leaf in tape.leaves()}


def _result(values: ArrayLike, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    out.is_leaf = False
    if requires:
        tape = _current_tape.get()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def constant(values: ArrayLike) -> Tensor:
    return Tensor(values, requires_grad=False)


# =============================================================================
# Element-wise arithmetic
# =============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, (a,), lambda g: (-g,))


def scalar_mul(a: Tensor, s: Union[Tensor, float]) -> Tensor:
    """a·s for a Python float or a single-element tensor s."""
    if not isinstance(s, Tensor):
        factor = float(s)
        return _result(a.values * factor, (a,), lambda g: (g * factor,))
    if s.size != 1:
        raise DimensionMismatch(f"scalar_mul: scale must have one element, got shape {s.shape}")
    factor = float(s.values.reshape(()))
    return _result(
        a.values * factor,
        (a, s),
        lambda g: (g * factor, np.full(s.shape, float(np.sum(g * a.values)))),
    )


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


# =============================================================================
# Linear algebra
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k)·(k, m) or the batched (B, n, k)·(B, k, m)."""
    ok = (
        a.values.ndim == b.values.ndim
        and a.values.ndim in (2, 3)
        and a.shape[:-2] == b.shape[:-2]
        and a.shape[-1] == b.shape[-2]
    )
    if not ok:
        raise DimensionMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g: Array):
        return (
            np.matmul(g, np.swapaxes(b.values, -1, -2)),
            np.matmul(np.swapaxes(a.values, -1, -2), g),
        )

    return _result(np.matmul(a.values, b.values), (a, b), _backward)


def matvec(m: Tensor, x: Tensor) -> Tensor:
    """(n, k)·(k,) or the batched (B, n, k)·(B, k)."""
    ok = (
        m.values.ndim == x.values.ndim + 1
        and m.values.ndim in (2, 3)
        and m.shape[:-2] == x.shape[:-1]
        and m.shape[-1] == x.shape[-1]
    )
    if not ok:
        raise DimensionMismatch(f"matvec: incompatible shapes {m.shape} and {x.shape}")

    def _backward(g: Array):
        return (
            g[..., :, None] * x.values[..., None, :],
            np.einsum("...nk,...n->...k", m.values, g),
        )

    return _result(np.einsum("...nk,...k->...n", m.values, x.values), (m, x), _backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1:
        raise DimensionMismatch(f"dot: expected vectors, got shape {a.shape}")
    _same_shape("dot", a, b)
    return _result(np.dot(a.values, b.values), (a, b), lambda g: (g * b.values, g * a.values))


def outer(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise DimensionMismatch(f"outer: expected vectors, got shapes {a.shape} and {b.shape}")
    return _result(np.outer(a.values, b.values), (a, b), lambda g: (g @ b.values, g.T @ a.values))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.values.ndim < 2:
        raise DimensionMismatch(f"transpose: need at least two axes, got shape {a.shape}")
    return _result(np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def diagonal(a: Tensor) -> Tensor:
    """Main diagonal of the trailing square axes."""
    if a.values.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"diagonal: trailing axes must be square, got shape {a.shape}")
    p = a.shape[-1]
    rows = np.arange(p)

    def _backward(g: Array):
        grad = np.zeros_like(a.values)
        grad[..., rows, rows] = g
        return (grad,)

    return _result(np.diagonal(a.values, axis1=-2, axis2=-1).copy(), (a,), _backward)


# =============================================================================
# Reductions and reshaping
# =============================================================================

def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _result(np.sum(a.values), (a,), lambda g: (np.full(a.shape, float(g)),))
    axis = axis % a.values.ndim

    def _backward(g: Array):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.sum(a.values, axis=axis), (a,), _backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionMismatch(f"reshape: cannot view {a.shape} as {shape}")
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Tile a vector of shape (m,) into an (n, m) matrix."""
    if a.values.ndim != 1:
        raise DimensionMismatch(f"repeat_rows: expected a vector, got shape {a.shape}")
    return _result(np.tile(a.values, (n, 1)), (a,), lambda g: (np.sum(g, axis=0),))


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing: ints, slices and tuples of them."""
    view = a.values[index]

    def _backward(g: Array):
        grad = np.zeros_like(a.values)
        grad[index] = g
        return (grad,)

    return _result(np.array(view), (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionMismatch("concat: nothing to concatenate")
    ndim = tensors[0].values.ndim
    axis = axis % ndim
    for t in tensors:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        first = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if t.values.ndim != ndim or other != first:
            raise DimensionMismatch(f"concat: shapes {tensors[0].shape} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), _backward)


# =============================================================================
# Non-linearities
# =============================================================================

def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = scipy.special.expit(a.values)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = (a.values > 0.0).astype(np.float64)
    return _result(a.values * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    slope = scipy.special.expit(a.values)
    return _result(np.logaddexp(0.0, a.values), (a,), lambda g: (g * slope,))


def lower_triangular_assemble(a: Tensor) -> Tensor:
    """
    Turn a length-p² head into a Cholesky factor.

    The trailing axis is read row-major as a p×p matrix, its strict upper
    triangle is zeroed and softplus is applied to the diagonal. Leading axes
    are batch axes. Gradients flow only through the retained entries.
    """
    p = int(round(np.sqrt(a.shape[-1]))) if a.values.ndim >= 1 else 0
    if p < 1 or p * p != a.shape[-1]:
        raise DimensionMismatch(f"lower_triangular_assemble: trailing axis must be a square length, got {a.shape}")
    square = a.values.reshape(a.shape[:-1] + (p, p))
    rows = np.arange(p)
    out = np.tril(square, k=-1)
    raw_diag = square[..., rows, rows]
    out[..., rows, rows] = np.logaddexp(0.0, raw_diag)
    slope = scipy.special.expit(raw_diag)

    def _backward(g: Array):
        grad = np.tril(g, k=-1)
        grad[..., rows, rows] = g[..., rows, rows] * slope
        return (grad.reshape(a.shape),)

    return _result(out, (a,), _backward)


# =============================================================================
# Finite-difference oracle
# =============================================================================

def numeric_gradient(
    fn: Callable[[list[Array]], float],
    arrays: Sequence[ArrayLike],
    h: float = 1e-5,
) -> list[Array]:
    """Central finite differences of a scalar function of several arrays."""
    points = [np.array(x, dtype=np.float64) for x in arrays]
    grads = [np.zeros_like(x) for x in points]
    for x, grad in zip(points, grads):
        flat = x.reshape(-1)
        out = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            upper = fn(points)
            flat[i] = saved - h
            lower = fn(points)
            flat[i] = saved
            out[i] = (upper - lower) / (2.0 * h)
    return grads
