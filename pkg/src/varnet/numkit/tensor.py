"""Array-valued reverse-mode differentiation over float64 numpy arrays.

Only a fixed set of primitives is supported. Anything else (numpy ufuncs,
``**`` with exponents other than 2, ...) raises :class:`UnsupportedOperation`
when the expression is built, not when it is differentiated.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special


class UnsupportedOperation(TypeError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate gradients into
    ``.grad`` on :meth:`backward`. Results whose inputs are all constant are
    plain constants, so frozen sub-networks cost no bookkeeping.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # numpy must defer to our reflected operators instead of broadcasting
    # a ufunc over the object
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __array__(self, dtype=None):
        raise UnsupportedOperation(
            "implicit conversion of a Tensor to an ndarray would drop gradients; use .data"
        )

    # -- backward ----------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not self.requires_grad:
            return
        order = _topo(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                grads[pid] = pg if pid not in grads else grads[pid] + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        if isinstance(exponent, (int, float)) and exponent == 2:
            return square(self)
        if isinstance(exponent, (int, float)) and exponent == 0.5:
            return sqrt(self)
        raise UnsupportedOperation(f"power with exponent {exponent!r} is not a supported primitive")

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, float, int, np.floating, np.integer)):
        return Tensor(x)
    if isinstance(x, (list, tuple)):
        return Tensor(np.asarray(x, dtype=np.float64))
    raise UnsupportedOperation(f"cannot build a Tensor from {type(x).__name__}")


def _node(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


# -- elementwise binary --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedOperation("matmul is defined for 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a batch of row vectors."""
    return add(matmul(x, w), b)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def sq_dist(x, c) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``x`` and ``c``."""
    x, c = as_tensor(x), as_tensor(c)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"sq_dist shape mismatch: {x.shape} vs {c.shape}")
    xd, cd = x.data, c.data
    d2 = (xd * xd).sum(1)[:, None] + (cd * cd).sum(1)[None, :] - 2.0 * (xd @ cd.T)
    np.maximum(d2, 0.0, out=d2)

    def backward(g):
        gx = 2.0 * (xd * g.sum(1)[:, None] - g @ cd) if x.requires_grad else None
        gc = 2.0 * (cd * g.sum(0)[:, None] - g.T @ xd) if c.requires_grad else None
        return gx, gc

    return _node(d2, (x, c), backward, "sq_dist")


# -- elementwise unary ---------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _node(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    r = np.sqrt(a.data)

    def backward(g):
        out = np.zeros_like(r)
        np.divide(g, 2.0 * r, out=out, where=r > 0)
        return (out,)

    return _node(r, (a,), backward, "sqrt")


# -- reductions and indexing ---------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def min_rows(a) -> Tensor:
    """Row-wise minimum of a 2-D tensor; ties route the gradient to the first index."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise UnsupportedOperation("min_rows expects a 2-D tensor")
    idx = np.argmin(a.data, axis=1)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], (a,), backward, "min_rows")


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward, "take")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# -- gradient entry point ------------------------------------------------------


def grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss_fn()`` with respect to ``params``.

    Every parameter must be a leaf with ``requires_grad=True``; parameters the
    loss does not depend on get a zero gradient.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad() parameters must be leaves with requires_grad=True")
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    loss.backward()
    out = []
    for p in params:
        out.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        p.zero_grad()
    return out
